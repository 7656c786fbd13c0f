"""AdamW training loop, metric traces and checkpoints for the toy model."""

from __future__ import annotations

import base64
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..tasks import Dataset, evaluate
from . import tape as ad
from .model import ModelConfig, init_params, loss_fn, predict

CHECKPOINT_FORMAT = "kla-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Non-finite loss or gradient; ``dump`` holds the diagnostic snapshot."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    clip: float = 1.0
    adam_eps: float = 1e-8
    batch_size: int = 32
    steps: int = 5000
    warmup: int = 0
    eval_every: int = 200
    patience: int = 10
    target_acc: float | None = None
    eval_samples: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Decoupled weight decay, applied to matrices only (``ndim >= 2``)."""

    def __init__(self, params: dict, cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        b1, b2 = c.betas
        self.t += 1
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[k]
            if c.weight_decay and p.ndim >= 2:
                p *= 1.0 - lr * c.weight_decay
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + c.adam_eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TraceRow:
    step: int
    loss: float
    eval_acc: float


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)
    best_acc: float = float("nan")
    best_step: int = 0
    steps_run: int = 0
    stop_reason: str = "steps"
    seconds: float = 0.0


def _diagnostics(step, loss, params, grads, batch_idx) -> dict:
    return {
        "step": step,
        "loss": None if not np.isfinite(loss) else loss,
        "batch_indices": [int(i) for i in batch_idx],
        "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
        "nonfinite_params": sorted(k for k, v in params.items() if not np.all(np.isfinite(v))),
        "nonfinite_grads": sorted(k for k, g in (grads or {}).items() if not np.all(np.isfinite(g))),
    }


def make_predictor(cfg: ModelConfig, params: dict) -> Callable:
    return lambda ids: predict(cfg, params, ids)


def train(
    cfg: ModelConfig,
    train_ds: Dataset,
    valid_ds: Dataset | None,
    opt: OptimConfig | None = None,
    seed: int = 42,
    *,
    params: dict | None = None,
    log: Callable[[str], None] | None = None,
    dump_path=None,
) -> TrainResult:
    """Minibatch AdamW on the masked cross-entropy.

    Batches come from a seeded permutation per epoch, so a run is a pure
    function of its inputs. Every ``eval_every`` steps the mean training loss
    of the window and the validation accuracy are recorded; training stops
    after ``patience`` evaluations without a new best, or once ``target_acc``
    is reached. The best evaluated parameters are returned.
    """
    opt = opt or OptimConfig()
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    result = TrainResult({k: v.copy() for k, v in params.items()})
    if opt.steps <= 0:
        return result
    if valid_ds is not None and opt.eval_samples:
        valid_ds = valid_ds.subset(slice(0, opt.eval_samples))
    adam = AdamW(params, opt)
    order = np.empty(0, dtype=np.int64)
    cursor = 0
    window = []
    best, stale = -1.0, 0
    t0 = time.perf_counter()

    def objective(p, ids, tgt, mask):
        return loss_fn(p, cfg, ids, tgt, mask)

    for step in range(1, opt.steps + 1):
        if cursor + opt.batch_size > len(order):
            order = rng.permutation(len(train_ds))
            cursor = 0
        idx = order[cursor : cursor + opt.batch_size]
        cursor += opt.batch_size
        mask = train_ds.loss_mask[idx]
        if not mask.any():
            continue
        loss, grads = ad.grad(objective, params, train_ds.input_ids[idx], train_ds.target_ids[idx], mask)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            dump = _diagnostics(step, loss, params, grads, idx)
            if dump_path is not None:
                with open(dump_path, "w", encoding="utf-8") as f:
                    json.dump(dump, f, indent=2)
            raise TrainingDiverged(f"non-finite loss or gradient at step {step}", dump)
        clip_by_global_norm(grads, opt.clip)
        lr = opt.lr * min(1.0, step / opt.warmup) if opt.warmup else opt.lr
        adam.step(params, grads, lr)
        window.append(loss)
        result.steps_run = step

        if step % opt.eval_every == 0 or step == opt.steps:
            acc = evaluate(make_predictor(cfg, params), valid_ds) if valid_ds is not None else float("nan")
            mean_loss = float(np.mean(window))
            window = []
            result.trace.append(TraceRow(step, mean_loss, acc))
            if log:
                log(f"step {step:5d}  loss {mean_loss:.4f}  eval_acc {acc:.4f}  {time.perf_counter() - t0:.0f}s")
            if valid_ds is None:
                result.params = {k: v.copy() for k, v in params.items()}
                continue
            if acc > best:
                best, stale = acc, 0
                result.best_acc, result.best_step = acc, step
                result.params = {k: v.copy() for k, v in params.items()}
            else:
                stale += 1
            if opt.target_acc is not None and acc >= opt.target_acc:
                result.stop_reason = "target"
                break
            if stale >= opt.patience:
                result.stop_reason = "patience"
                break
    result.seconds = time.perf_counter() - t0
    return result


# -- persistence ----------------------------------------------------------------


def write_trace(trace: list, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "eval_acc"])
        for row in trace:
            w.writerow([row.step, repr(float(row.loss)), repr(float(row.eval_acc))])


def read_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return [TraceRow(int(r["step"]), float(r["loss"]), float(r["eval_acc"])) for r in csv.DictReader(f)]


def encode_tensor(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f8")  # tobytes() is C order; ascontiguousarray would lift 0-d to 1-d
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_tensor(d: dict) -> np.ndarray:
    if d.get("dtype") != "<f8":
        raise ValueError(f"unsupported tensor dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(tuple(d["shape"])).astype(np.float64)


def save_checkpoint(path, params: dict, cfg: ModelConfig, meta: dict | None = None) -> None:
    """JSON document; each tensor is base64 of little-endian float64 bytes."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "meta": meta or {},
        "tensors": {k: encode_tensor(v) for k, v in sorted(params.items())},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple[dict, ModelConfig, dict]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    params = {k: decode_tensor(v) for k, v in doc["tensors"].items()}
    return params, ModelConfig(**doc["model_config"]), doc.get("meta", {})
