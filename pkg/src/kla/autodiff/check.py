"""Tape gradients against central finite differences on a tiny model."""

from __future__ import annotations

import numpy as np

from . import tape as ad
from .model import ModelConfig, init_params, loss_fn

ALL_RULES = ("linear", "retnet_mamba2", "gla", "longhorn", "deltanet", "gdn", "kla")
ABLATIONS = (
    {"rule": "kla", "normalization": "learned_scalar"},
    {"rule": "kla", "gating": "single"},
    {"rule": "kla", "seq_factor": "inv_sqrt"},
    {"rule": "gdn", "normalization": "key_norm_only"},
)
CHECK_CONFIGS = tuple({"rule": r} for r in ALL_RULES) + ABLATIONS
MAGNITUDE_FLOOR = 1e-8  # entries where both gradients are below this are skipped


def tiny_config(fused: bool = True, **overrides) -> ModelConfig:
    # unit-scale weights keep gradients well above the finite-difference noise
    base = dict(vocab=7, d_model=6, d_k=3, d_v_override=4, n_layers=2, conv_size=2, init_std=0.5, fused=fused)
    base.update(overrides)
    return ModelConfig(**base)


def relative_error(a: dict, b: dict, floor: float = MAGNITUDE_FLOOR) -> float:
    """Largest ``|a - b| / max(|a|, |b|)`` over entries above ``floor``."""
    worst = 0.0
    for name in a:
        x, y = np.abs(a[name]), np.abs(b[name])
        scale = np.maximum(x, y)
        sel = scale > floor
        if sel.any():
            worst = max(worst, float((np.abs(a[name] - b[name])[sel] / scale[sel]).max()))
    return worst


def gradient_check(cfg: ModelConfig, seed: int = 0, batch: int = 2, length: int = 4, h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng)
    # move gains, biases and the learned scalar off their symmetric init values
    p = {k: v + rng.normal(0.0, 0.3, np.shape(v)) for k, v in p.items()}
    ids = rng.integers(0, cfg.vocab, (batch, length))
    targets = rng.integers(0, cfg.vocab, (batch, length))
    mask = rng.random((batch, length)) < 0.7
    mask[0, 0] = True

    def f(pp):
        return loss_fn(pp, cfg, ids, targets, mask)

    _, exact = ad.grad(f, p)
    return relative_error(exact, ad.finite_diff(f, p, h))


def check_all(seed: int = 0) -> dict[str, float]:
    """Every rule and ablation through both the fused and the composed scan."""
    out = {}
    for overrides in CHECK_CONFIGS:
        label = "/".join(str(v) for v in overrides.values())
        for fused in (True, False):
            out[f"{label}/{'fused' if fused else 'composed'}"] = gradient_check(tiny_config(fused, **overrides), seed)
    return out
