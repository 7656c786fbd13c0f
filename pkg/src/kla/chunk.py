"""Chunkwise-parallel execution of the gated delta recurrence.

Within a chunk of ``C`` tokens the recurrence ``S_i = alpha_i (I - beta_i k_i
k_i^T) S_{i-1} + beta_i k_i v_i^T`` is solved in closed form. With
``gamma_i`` the running product of the decays, ``A[i, j]`` the decay
accumulated over positions ``j+1 .. i`` and ``B = Diag(beta)``::

    (I + B (A_strict * K K^T)) U = B (V - D_gamma K S0)
    O     = D_gamma Q S0 + (A * Q K^T) U
    S_out = gamma_C S0 + K^T Diag(A[C, :]) U

The coefficient ``beta`` is the only thing that separates GDN from KLA, so a
single solver serves every delta rule; :func:`build_artifacts` picks the
coefficients. Decay factors between positions are formed as fresh products
of ``alpha`` over the interval, never as ratios of cumulative products,
which keeps them exact when some ``alpha`` are zero or tiny.

A second, independent route builds the same states from the WY auxiliary
vectors ``w_r`` and ``u_r`` (:func:`wy_build`, :func:`run_wy`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .recurrence import (
    DEFAULT_EPS,
    ConfigurationError,
    SingularityError,
    Rule,
    TokenSequence,
    UpdateRule,
    as_rule,
    as_sequence,
    delta_coefficients,
    divides_by_key_norm,
    run_sequence,
)
from .tensor_core import ShapeError, forward_substitution

DEFAULT_CHUNK = 64

# Stacked K, V, Q plus per-position gates; identical layout to TokenSequence.
ChunkBatch = TokenSequence


@dataclass
class ChunkArtifacts:
    gammas: np.ndarray
    b_diag: np.ndarray
    a_full: np.ndarray
    a_strict: np.ndarray
    u_mat: np.ndarray | None = None


class ChunkResult(NamedTuple):
    o_mat: np.ndarray
    s_out: np.ndarray
    artifacts: ChunkArtifacts


def _chunk_rule(rule) -> UpdateRule:
    rule = as_rule(rule)
    if not rule.is_delta:
        raise ConfigurationError(f"the chunkwise solver needs a delta rule, got {rule.kind.value}")
    return rule


def effective_decays(rule: UpdateRule, chunk: TokenSequence) -> np.ndarray:
    if rule.kind in (Rule.DELTANET, Rule.LONGHORN):
        return np.ones_like(chunk.alpha)
    if rule.gating == "single":
        return chunk.eta.copy()
    return chunk.alpha


def decay_matrix(alphas: np.ndarray) -> np.ndarray:
    """Lower-triangular ``A`` with ``A[i, j] = prod(alphas[j+1 : i+1])`` for ``j <= i``."""
    c = alphas.shape[0]
    lower = np.tri(c, c, -1, dtype=bool)
    factors = np.where(lower, alphas[:, None], 1.0).astype(alphas.dtype, copy=False)
    return np.tril(np.cumprod(factors, axis=0))


def build_artifacts(chunk: TokenSequence, eps: float = DEFAULT_EPS, rule=Rule.KLA, *, start: int = 1) -> ChunkArtifacts:
    rule = _chunk_rule(rule)
    alphas = effective_decays(rule, chunk)
    key_norm_sq = np.einsum("ij,ij->i", chunk.k, chunk.k)
    if np.any(key_norm_sq + eps == 0) and divides_by_key_norm(rule):
        raise SingularityError("zero key with eps = 0")
    positions = np.arange(start, start + len(chunk))
    betas = np.asarray(delta_coefficients(rule, chunk.eta, key_norm_sq, eps, positions), dtype=chunk.k.dtype)
    betas = np.broadcast_to(betas, alphas.shape).copy()
    a_full = decay_matrix(alphas)
    return ChunkArtifacts(
        gammas=np.cumprod(alphas),
        b_diag=betas,
        a_full=a_full,
        a_strict=np.tril(a_full, -1),
    )


def system_matrix(chunk: TokenSequence, art: ChunkArtifacts) -> np.ndarray:
    """Unit-lower-triangular ``I + B (A_strict * K K^T)``."""
    gram = chunk.k @ chunk.k.T
    m = art.b_diag[:, None] * (art.a_strict * gram)
    m[np.diag_indices_from(m)] = 1.0
    return m


def normalized_queries(q: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", q, q))
    safe = np.where(norms > 0, norms, 1.0)
    return q / safe[:, None]


def chunk_solve(
    s0: np.ndarray,
    chunk: TokenSequence,
    eps: float = DEFAULT_EPS,
    rule=Rule.KLA,
    *,
    start: int = 1,
    checked: bool = True,
) -> ChunkResult:
    """Outputs and outgoing state of one chunk from incoming state ``s0``."""
    if s0.shape != (chunk.d_k, chunk.d_v):
        raise ShapeError(f"state {s0.shape} does not fit d_k={chunk.d_k}, d_v={chunk.d_v}")
    art = build_artifacts(chunk, eps, rule, start=start)
    k, v = chunk.k, chunk.v
    q = normalized_queries(chunk.q)
    g = art.gammas[:, None]
    rhs = art.b_diag[:, None] * (v - g * (k @ s0))
    u = forward_substitution(system_matrix(chunk, art), rhs, checked=checked)
    art.u_mat = u
    o = g * (q @ s0) + (art.a_full * (q @ k.T)) @ u
    s_out = art.gammas[-1] * s0 + k.T @ (art.a_full[-1][:, None] * u)
    return ChunkResult(o, s_out, art)


class RunResult(NamedTuple):
    outputs: np.ndarray
    final_state: np.ndarray


def run_chunked(
    rule,
    s0: np.ndarray,
    tokens,
    chunk_len: int = DEFAULT_CHUNK,
    eps: float = DEFAULT_EPS,
    *,
    checked: bool = True,
) -> RunResult:
    """Process ``tokens`` in chunks of ``chunk_len``; the last chunk may be short."""
    rule = _chunk_rule(rule)
    if chunk_len < 1:
        raise ValueError(f"chunk length must be >= 1, got {chunk_len}")
    seq = as_sequence(tokens)
    n = len(seq)
    if n == 0:
        raise ValueError("empty token sequence")
    out = np.empty((n, seq.d_v), dtype=np.result_type(s0, seq.k))
    s = s0
    for lo in range(0, n, chunk_len):
        hi = min(lo + chunk_len, n)
        o, s, _ = chunk_solve(s, seq.slice(lo, hi), eps, rule, start=lo + 1, checked=checked)
        out[lo:hi] = o
    return RunResult(out, s)


class WYResult(NamedTuple):
    p_list: list
    h_list: list
    w_vecs: np.ndarray
    u_vecs: np.ndarray
    p_direct: list
    h_direct: list


def wy_vectors(chunk: TokenSequence, art: ChunkArtifacts) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary vectors from the recursions

    ``w_i = beta_i (gamma_i k_i - sum_{r<i} A[i,r] (k_r.k_i) w_r)``
    ``u_i = beta_i (v_i - sum_{r<i} A[i,r] (k_r.k_i) u_r)``.
    """
    k, v = chunk.k, chunk.v
    c = len(chunk)
    w = np.zeros_like(k)
    u = np.zeros_like(v)
    gram = k @ k.T
    for i in range(c):
        coef = art.a_full[i, :i] * gram[:i, i]
        w[i] = art.b_diag[i] * (art.gammas[i] * k[i] - coef @ w[:i])
        u[i] = art.b_diag[i] * (v[i] - coef @ u[:i])
    return w, u


def wy_build(s0: np.ndarray, chunk: TokenSequence, eps: float = DEFAULT_EPS, rule=Rule.KLA, *, start: int = 1) -> WYResult:
    """Transition products ``P_i`` and write sums ``H_i`` (with ``S_i = P_i S0 +
    H_i``) built twice: from the WY vectors, and by multiplying out the
    per-token factors ``alpha_r (I - beta_r k_r k_r^T)`` directly.
    """
    art = build_artifacts(chunk, eps, rule, start=start)
    alphas = effective_decays(_chunk_rule(rule), chunk)
    k, v = chunk.k, chunk.v
    c, d_k = k.shape
    w, u = wy_vectors(chunk, art)
    eye = np.eye(d_k, dtype=k.dtype)
    p_list, h_list = [], []
    for i in range(c):
        dec = art.a_full[i, : i + 1][:, None]
        p_list.append(art.gammas[i] * eye - k[: i + 1].T @ (dec * w[: i + 1]))
        h_list.append(k[: i + 1].T @ (dec * u[: i + 1]))

    factors = [alphas[r] * (eye - art.b_diag[r] * np.multiply.outer(k[r], k[r])) for r in range(c)]
    p_direct, h_direct = [], []
    for i in range(c):
        tail = eye
        h = np.zeros((d_k, v.shape[1]), dtype=k.dtype)
        for j in range(i, -1, -1):
            h += tail @ np.multiply.outer(art.b_diag[j] * k[j], v[j])
            tail = tail @ factors[j]
        p_direct.append(tail)
        h_direct.append(h)
    return WYResult(p_list, h_list, w, u, p_direct, h_direct)


def combined_wy_states(s0: np.ndarray, chunk: TokenSequence, eps: float = DEFAULT_EPS, rule=Rule.KLA, *, start: int = 1) -> np.ndarray:
    """States ``S_i = gamma_i S0 + sum_{r<=i} A[i,r] k_r uhat_r^T`` with
    ``uhat_r = u_r - S0^T w_r``, stacked as ``(C, d_k, d_v)``."""
    art = build_artifacts(chunk, eps, rule, start=start)
    w, u = wy_vectors(chunk, art)
    u_hat = u - w @ s0
    k = chunk.k
    states = np.empty((len(chunk),) + s0.shape, dtype=np.result_type(s0, k))
    for i in range(len(chunk)):
        dec = art.a_full[i, : i + 1][:, None]
        states[i] = art.gammas[i] * s0 + k[: i + 1].T @ (dec * u_hat[: i + 1])
    return states


def run_wy(rule, s0: np.ndarray, tokens, chunk_len: int = DEFAULT_CHUNK, eps: float = DEFAULT_EPS) -> RunResult:
    """Third execution path: per-chunk states from the combined WY form."""
    rule = _chunk_rule(rule)
    seq = as_sequence(tokens)
    n = len(seq)
    out = np.empty((n, seq.d_v), dtype=np.result_type(s0, seq.k))
    s = s0
    for lo in range(0, n, chunk_len):
        hi = min(lo + chunk_len, n)
        chunk = seq.slice(lo, hi)
        states = combined_wy_states(s, chunk, eps, rule, start=lo + 1)
        q = normalized_queries(chunk.q)
        out[lo:hi] = np.einsum("ck,ckv->cv", q, states)
        s = states[-1]
    return RunResult(out, s)


@dataclass
class WYReport:
    deviations: list
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def verify_combined_wy(s0: np.ndarray, chunk, eps: float = DEFAULT_EPS, rule=Rule.KLA, *, tolerance: float = 1e-9) -> WYReport:
    """Compare combined-WY states against the tokenwise fold at every position."""
    chunk = as_sequence(chunk)
    states = combined_wy_states(s0, chunk, eps, rule)
    trace = run_sequence(rule, s0, chunk, eps, trace=True).trace
    devs = [float(np.max(np.abs(states[i] - t.new_state))) for i, t in enumerate(trace)]
    return WYReport(devs, max(devs), tolerance)
