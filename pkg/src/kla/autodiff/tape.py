"""A small reverse-mode tape over numpy arrays.

Every differentiable operation appends a :class:`Node` holding its forward
value, the indices of its parents and a vector-Jacobian closure. Parents
always precede their children, so the backward pass is a single reverse sweep.

Operations are plain functions (``add``, ``matmul``, ``sigmoid`` ...). When
none of their arguments is a :class:`Var` they simply evaluate with numpy and
return an array, which lets the same model code run without a tape for
evaluation and finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class TapeError(TypeError):
    """An operation the tape cannot record."""


@dataclass(frozen=True)
class IndexedGrad:
    """Gradient that is nonzero only on ``value[index]``; avoids dense buffers."""

    index: object
    value: np.ndarray


@dataclass
class Node:
    op: str
    value: np.ndarray
    parents: tuple[int, ...]
    vjp: Callable | None


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def var(self, value, name: str = "input") -> "Var":
        return self._push(name, np.asarray(value, dtype=np.float64), (), None)

    def _push(self, op, value, parents, vjp) -> "Var":
        self.nodes.append(Node(op, value, parents, vjp))
        return Var(self, len(self.nodes) - 1)

    def backward(self, out: "Var", seed=None) -> list:
        """Gradients of ``out`` w.r.t. every node, indexed like ``nodes``."""
        if out.tape is not self:
            raise TapeError("output belongs to another tape")
        grads: list = [None] * (out.index + 1)
        grads[out.index] = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        owned = set()  # buffers safe to update in place
        for i in range(out.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                cur = grads[p]
                if isinstance(pg, IndexedGrad):
                    if cur is None:
                        cur = grads[p] = np.zeros_like(self.nodes[p].value)
                    elif p not in owned:
                        cur = grads[p] = np.array(cur, dtype=np.float64)
                    owned.add(p)
                    cur[pg.index] += pg.value
                elif cur is None:
                    grads[p] = pg
                else:
                    grads[p] = cur + pg
                    owned.add(p)
        return grads


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")
    # block numpy ufuncs / functions from silently consuming a Var
    __array_ufunc__ = None
    __array_function__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __array__(self, *args, **kwargs):
        raise TapeError("use .value to leave the tape explicitly")

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == 0.5:
            return sqrt(self)
        raise TapeError(f"power {p} is not a tape operation")


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
    return tape


def _record(op: str, value, args, vjp):
    """Push ``value`` if any of ``args`` is on a tape; ``vjp(g)`` returns one
    gradient per argument (``None`` for constants)."""
    tape = _tape_of(*args)
    if tape is None:
        return value
    idx = [i for i, a in enumerate(args) if isinstance(a, Var)]
    parents = tuple(args[i].index for i in idx)

    def picked(g):
        full = vjp(g)
        return [full[i] for i in idx]

    return tape._push(op, value, parents, picked)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(x):
    return np.shape(value_of(x))


# -- elementwise arithmetic -------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("add", av + bv, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("sub", av - bv, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("mul", av * bv, (a, b), lambda g: (unbroadcast(g * bv, sa), unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record("div", out, (a, b), lambda g: (unbroadcast(g / bv, sa), unbroadcast(-g * out / bv, sb)))


def neg(a):
    return _record("neg", -value_of(a), (a,), lambda g: (-g,))


def square(a):
    av = value_of(a)
    return _record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(value_of(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value_of(a)))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(value_of(a))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a):
    av = value_of(a)
    s = 1.0 / (1.0 + np.exp(-av))
    return _record("silu", av * s, (a,), lambda g: (g * s * (1.0 + av * (1.0 - s)),))


def clip(a, lo, hi):
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _record("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape ---------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    av = value_of(a)
    old = av.shape
    return _record("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    av = value_of(a)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    av = value_of(a)
    return _record("getitem", av[idx], (a,), lambda g: (IndexedGrad(idx, g),))


def stack(xs, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(vals))]

    return _record("stack", out, tuple(xs), vjp)


def concat(xs, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(vals))]

    return _record("concat", out, tuple(xs), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for 1-D or 2-D ``b``, or batched with equal leading shapes."""
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        if bv.ndim == 1:
            return g[..., None] * bv, (av * g[..., None]).reshape(-1, bv.shape[0]).sum(axis=0)
        if bv.ndim == 2:
            da = g @ bv.T
            if av.ndim == 1:
                db = np.multiply.outer(av, g)
            else:
                db = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return da, db
        return g @ np.swapaxes(bv, -1, -2), unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _record("matmul", av @ bv, (a, b), vjp)


def einsum(spec: str, a, b):
    """Two-operand einsum without repeated indices inside one operand."""
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise TapeError(f"repeated index in einsum {spec!r}")
    if not set(sa) <= set(sb) | set(out) or not set(sb) <= set(sa) | set(out):
        raise TapeError(f"einsum {spec!r} sums an index away inside one operand")
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        return (
            np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True),
            np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True),
        )

    return _record("einsum", np.einsum(spec, av, bv, optimize=True), (a, b), vjp)


# -- model-specific fused ops ---------------------------------------------------


def embed(table, ids):
    tv = value_of(table)
    ids = np.asarray(ids)

    def vjp(g):
        dt = np.zeros_like(tv)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record("embed", tv[ids], (table,), vjp)


def causal_conv(x, w):
    """Depthwise causal convolution over axis -2: ``y[..., t, c] =
    sum_j w[j, c] x[..., t-j, c]`` with zero history."""
    xv, wv = value_of(x), value_of(w)
    width, t_len = wv.shape[0], xv.shape[-2]
    out = np.zeros_like(xv)
    for j in range(min(width, t_len)):
        out[..., j:, :] += wv[j] * xv[..., : t_len - j, :]

    def vjp(g):
        dx = np.zeros_like(xv)
        dw = np.zeros_like(wv)
        for j in range(min(width, t_len)):
            dx[..., : t_len - j, :] += wv[j] * g[..., j:, :]
            dw[j] = (g[..., j:, :] * xv[..., : t_len - j, :]).reshape(-1, wv.shape[1]).sum(axis=0)
        return dx, dw

    return _record("causal_conv", out, (x, w), vjp)


def cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    lv = value_of(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross entropy over an empty mask")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float((picked * mask).sum()) / count

    def vjp(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / count)),)

    return _record("cross_entropy", np.asarray(loss), (logits,), vjp)


def gated_delta_scan(k, v, q, decay, beta, s0=None, *, delta: bool = True):
    """Fused recurrence over axis 1 for a batch of sequences.

    Shapes: ``k, q`` (B, T, d_k); ``v`` (B, T, d_v); ``decay`` (B, T, d_k)
    row decay of the state; ``beta`` (B, T) write scale. Per step::

        S~ = decay_t[:, None] * S
        e  = v_t - delta * S~^T k_t
        S  = S~ + beta_t k_t e^T
        o_t = S^T q_t

    Returns outputs (B, T, d_v). Every rule in the family is an instance.
    """
    kv, vv, qv, av, bv = (value_of(x) for x in (k, v, q, decay, beta))
    b, t_len, d_k = kv.shape
    d_v = vv.shape[-1]
    bv = np.broadcast_to(bv, (b, t_len))
    bk = bv[:, :, None] * kv  # scaled keys
    states = np.empty((t_len + 1, b, d_k, d_v))
    states[0] = 0.0 if s0 is None else value_of(s0)
    out = np.empty((b, t_len, d_v))
    errs = np.empty((t_len, b, d_v))
    for t in range(t_len):
        s = states[t + 1]
        np.multiply(av[:, t, :, None], states[t], out=s)
        if delta:
            np.subtract(vv[:, t], np.matmul(kv[:, t, None, :], s)[:, 0], out=errs[t])
        else:
            errs[t] = vv[:, t]
        s += bk[:, t, :, None] * errs[t][:, None, :]
        out[:, t] = np.matmul(qv[:, t, None, :], s)[:, 0]

    def vjp(g):
        dk = np.empty_like(kv)
        dv = np.empty_like(vv)
        dq = np.empty_like(qv)
        da = np.empty_like(av)
        db = np.empty((b, t_len))
        ds = np.zeros((b, d_k, d_v))
        for t in range(t_len - 1, -1, -1):
            kt, e, s_prev = kv[:, t], errs[t], states[t]
            gt = g[:, t]
            ds += qv[:, t, :, None] * gt[:, None, :]
            dq[:, t] = np.matmul(states[t + 1], gt[:, :, None])[:, :, 0]
            ds_e = np.matmul(ds, e[:, :, None])[:, :, 0]  # (B, d_k)
            db[:, t] = np.einsum("bk,bk->b", kt, ds_e)
            de = np.matmul(bk[:, t, None, :], ds)[:, 0]
            dv[:, t] = de
            dkt = bv[:, t, None] * ds_e
            if delta:
                # S~ de with S~ = Diag(a) S_prev
                dkt -= av[:, t] * np.matmul(s_prev, de[:, :, None])[:, :, 0]
                ds -= kt[:, :, None] * de[:, None, :]
            dk[:, t] = dkt
            da[:, t] = np.einsum("bkv,bkv->bk", ds, s_prev)
            ds *= av[:, t, :, None]
        db = unbroadcast(db, np.shape(value_of(beta)))
        ds0 = ds if s0 is not None else None
        return dk, dv, dq, da, db, ds0

    return _record("gated_delta_scan", out, (k, v, q, decay, beta, s0), vjp)


def backward(loss: Var, wrt: dict) -> dict:
    """Gradients of scalar ``loss`` for the named leaf variables in ``wrt``."""
    grads = loss.tape.backward(loss)
    result = {}
    for name, var in wrt.items():
        g = grads[var.index] if var.index < len(grads) else None
        result[name] = np.zeros_like(var.value) if g is None else np.asarray(g)
    return result


def grad(loss_fn: Callable, params: dict, *args, **kwargs) -> tuple[float, dict]:
    """Loss value and exact gradients of ``loss_fn(params, *args)``."""
    tape = Tape()
    wrt = {name: tape.var(value, name) for name, value in params.items()}
    loss = loss_fn(wrt, *args, **kwargs)
    if not isinstance(loss, Var):
        raise TapeError("loss does not depend on any parameter")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    return float(loss.value), backward(loss, wrt)


def finite_diff(loss_fn: Callable, params: dict, h: float = 1e-5, *args, **kwargs) -> dict:
    """Central differences, one scalar parameter at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(base, *args, **kwargs))
            flat[i] = old - h
            down = float(loss_fn(base, *args, **kwargs))
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads
