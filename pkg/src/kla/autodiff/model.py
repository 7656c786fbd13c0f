"""Toy recurrent language model for the synthetic tasks.

Architecture: token embedding, ``n_layers`` blocks of (pre-norm recurrent
mixer + pre-norm SiLU MLP, both residual), final RMS norm and a linear head.
The mixer projects queries, keys and values, runs them through a short
depthwise causal convolution and SiLU, computes the gates and the write
coefficient for the selected rule, and runs the recurrence. The block layout
is a reconstruction of a common small-model setup.

Parameters live in a flat ``dict`` (``"l0.w_k"``, ``"head"`` ...), so the same
functions run on plain arrays (evaluation, finite differences) and on tape
variables (training).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..recurrence import DECAYED_RULES, ETA_FLOOR, Rule, UpdateRule, sequence_factor
from . import tape as ad

QUERY_NORM_FLOOR = 1e-12


@dataclass
class ModelConfig:
    vocab: int = 64
    d_model: int = 64
    d_k: int = 32
    v_expand: float = 1.0
    n_layers: int = 2
    rule: str = "kla"
    normalization: str = "kaczmarz"
    gating: str = "dual"
    seq_factor: str | None = None
    conv_size: int = 4
    mlp_ratio: int = 2
    eps: float = 1e-6
    norm_eps: float = 1e-5
    init_std: float = 0.02
    fused: bool = True
    d_v_override: int | None = field(default=None)

    def __post_init__(self):
        self.update_rule  # validates the combination

    @property
    def d_v(self) -> int:
        if self.d_v_override is not None:
            return self.d_v_override
        return max(1, int(round(self.d_k * self.v_expand)))

    @property
    def update_rule(self) -> UpdateRule:
        return UpdateRule(Rule(self.rule), self.normalization, self.gating, self.seq_factor)

    def to_dict(self) -> dict:
        return asdict(self)


def gate_names(cfg: ModelConfig) -> list[str]:
    rule = cfg.update_rule
    if rule.kind is Rule.LINEAR:
        return []
    if rule.gating == "single":
        return ["gate"]
    names = ["alpha"] if rule.kind in DECAYED_RULES else []
    if rule.kind is not Rule.GLA:
        names.append("eta")
    return names


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Normal(0, init_std) projections, zero biases, unit norm gains."""
    std = cfg.init_std
    d, dk, dv = cfg.d_model, cfg.d_k, cfg.d_v
    p = {"embed": rng.normal(0.0, std, (cfg.vocab, d))}
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        p[pre + "norm1"] = np.ones(d)
        p[pre + "w_q"] = rng.normal(0.0, std, (d, dk))
        p[pre + "w_k"] = rng.normal(0.0, std, (d, dk))
        p[pre + "w_v"] = rng.normal(0.0, std, (d, dv))
        if cfg.conv_size > 0:
            bound = 1.0 / np.sqrt(cfg.conv_size)
            for name, width in (("conv_q", dk), ("conv_k", dk), ("conv_v", dv)):
                p[pre + name] = rng.uniform(-bound, bound, (cfg.conv_size, width))
        for g in gate_names(cfg):
            if cfg.rule == Rule.GLA.value and g == "alpha":
                p[pre + "w_alpha"] = rng.normal(0.0, std, (d, dk))
                p[pre + "b_alpha"] = np.zeros(dk)
            else:
                p[pre + f"w_{g}"] = rng.normal(0.0, std, d)
                p[pre + f"b_{g}"] = np.zeros(())
        if cfg.normalization == "learned_scalar":
            p[pre + "beta_scalar"] = np.ones(())
        p[pre + "w_o"] = rng.normal(0.0, std, (dv, d))
        p[pre + "norm2"] = np.ones(d)
        p[pre + "w_1"] = rng.normal(0.0, std, (d, cfg.mlp_ratio * d))
        p[pre + "w_2"] = rng.normal(0.0, std, (cfg.mlp_ratio * d, d))
    p["norm_f"] = np.ones(d)
    p["head"] = rng.normal(0.0, std, (d, cfg.vocab))
    return p


def rms_norm(x, gain, eps: float):
    ms = ad.mean(ad.square(x), axis=-1, keepdims=True)
    return x / ad.sqrt(ms + eps) * gain


def write_coefficient(cfg: ModelConfig, p: dict, pre: str, k, eta):
    """Per-position write scale (B, T) for the configured rule."""
    rule = cfg.update_rule
    if rule.kind in (Rule.LINEAR, Rule.GLA):
        return None
    if rule.kind is Rule.RETNET_MAMBA2:
        return eta
    nsq = ad.sum(ad.square(k), axis=-1)
    if rule.normalization == "none":
        beta = eta
    elif rule.normalization == "key_norm_only":
        beta = 1.0 / (nsq + cfg.eps)
    elif rule.normalization == "learned_scalar":
        beta = p[pre + "beta_scalar"] / (nsq + cfg.eps)
    elif rule.kind is Rule.KLA:
        beta = eta / (nsq + cfg.eps)
    else:
        beta = eta
    if rule.seq_factor is not None:
        t_len = ad.value_of(k).shape[1]
        beta = beta * sequence_factor(rule.seq_factor, np.arange(1, t_len + 1))
    if rule.kind is Rule.LONGHORN:
        beta = beta / (1.0 + beta * nsq)
    return beta


def gates(cfg: ModelConfig, p: dict, pre: str, h):
    """Decay (B, T, d_k) or None, and write gate eta (B, T) or None."""
    rule = cfg.update_rule
    if rule.kind is Rule.LINEAR:
        return None, None
    if rule.gating == "single":
        g = ad.clip(ad.sigmoid(h @ p[pre + "w_gate"] + p[pre + "b_gate"]), ETA_FLOOR, 1.0)
        return g, g
    alpha = eta = None
    if rule.kind is Rule.GLA:
        alpha = ad.sigmoid(h @ p[pre + "w_alpha"] + p[pre + "b_alpha"])
    elif rule.kind in DECAYED_RULES:
        alpha = ad.sigmoid(h @ p[pre + "w_alpha"] + p[pre + "b_alpha"])
    if rule.kind is not Rule.GLA:
        eta = ad.clip(ad.sigmoid(h @ p[pre + "w_eta"] + p[pre + "b_eta"]), ETA_FLOOR, 1.0)
    return alpha, eta


def _row_decay(cfg: ModelConfig, alpha, shape):
    b, t_len = shape
    if alpha is None:
        return np.ones((b, t_len, cfg.d_k))
    if ad.value_of(alpha).ndim == 3:
        return alpha
    return ad.reshape(alpha, (b, t_len, 1)) * np.ones((1, 1, cfg.d_k))


def composed_scan(k, v, q, decay, beta, *, delta: bool):
    """The recurrence spelled out token by token with elementary tape ops."""
    kv = ad.value_of(k)
    b, t_len, d_k = kv.shape
    d_v = ad.value_of(v).shape[-1]
    s = np.zeros((b, d_k, d_v))
    outs = []
    for t in range(t_len):
        kt, vt, qt = k[:, t], v[:, t], q[:, t]
        s_tilde = decay[:, t, :, None] * s
        if delta:
            e = vt - ad.einsum("bk,bkv->bv", kt, s_tilde)
        else:
            e = vt
        kt_scaled = kt * beta[:, t, None]
        s = s_tilde + ad.einsum("bk,bv->bkv", kt_scaled, e)
        outs.append(ad.einsum("bk,bkv->bv", qt, s))
    return ad.stack(outs, axis=1)


def mixer(cfg: ModelConfig, p: dict, pre: str, h):
    q = h @ p[pre + "w_q"]
    k = h @ p[pre + "w_k"]
    v = h @ p[pre + "w_v"]
    if cfg.conv_size > 0:
        q = ad.silu(ad.causal_conv(q, p[pre + "conv_q"]))
        k = ad.silu(ad.causal_conv(k, p[pre + "conv_k"]))
        v = ad.silu(ad.causal_conv(v, p[pre + "conv_v"]))
    qn = q / ad.sqrt(ad.sum(ad.square(q), axis=-1, keepdims=True) + QUERY_NORM_FLOOR)
    alpha, eta = gates(cfg, p, pre, h)
    shape = ad.value_of(h).shape[:2]
    beta = write_coefficient(cfg, p, pre, k, eta)
    if beta is None:
        beta = np.ones(shape)
    decay = _row_decay(cfg, alpha, shape)
    delta = cfg.update_rule.is_delta
    if cfg.fused:
        return ad.gated_delta_scan(k, v, qn, decay, beta, delta=delta)
    return composed_scan(k, v, qn, decay, beta, delta=delta)


def forward(cfg: ModelConfig, p: dict, ids: np.ndarray):
    """Logits (B, T, vocab) for token ids (B, T)."""
    x = ad.embed(p["embed"], ids)
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        h = rms_norm(x, p[pre + "norm1"], cfg.norm_eps)
        x = x + mixer(cfg, p, pre, h) @ p[pre + "w_o"]
        h = rms_norm(x, p[pre + "norm2"], cfg.norm_eps)
        x = x + ad.silu(h @ p[pre + "w_1"]) @ p[pre + "w_2"]
    return rms_norm(x, p["norm_f"], cfg.norm_eps) @ p["head"]


def loss_fn(p: dict, cfg: ModelConfig, ids, targets, mask):
    return ad.cross_entropy(forward(cfg, p, ids), targets, mask)


def predict(cfg: ModelConfig, p: dict, ids: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax predictions (B, T) without recording a tape."""
    plain = {k: ad.value_of(v) for k, v in p.items()}
    out = []
    for lo in range(0, ids.shape[0], batch_size):
        out.append(np.argmax(forward(cfg, plain, ids[lo : lo + batch_size]), axis=-1))
    return np.concatenate(out, axis=0)
