"""Tokenwise state updates for linear attention and the delta-rule family.

Every rule edits a state ``S`` of shape ``(d_k, d_v)`` and reads it with a
normalized query, ``o = S^T q / |q|``. The delta rules (Longhorn, DeltaNet,
GDN, KLA) write the residual ``e = v - S~^T k`` along ``k``; they differ in
the decay they apply first and in the scalar that multiplies the write:

=============  ===========  =======================================
rule           decay        write
=============  ===========  =======================================
linear         none         ``S + k v^T``
retnet_mamba2  ``alpha``    ``alpha S + eta k v^T``
gla            ``Diag(a)``  ``Diag(a) S + k v^T``
longhorn       none         ``S + rho k e^T``, ``rho = eta/(1 + eta|k|^2)``
deltanet       none         ``S + eta k e^T``
gdn            ``alpha``    ``S~ + eta k e^T``
kla            ``alpha``    ``S~ + eta/(|k|^2 + eps) k e^T``
=============  ===========  =======================================

The Longhorn step size is the closed-form implicit-gradient step for its
objective; it is a reconstruction, not a published formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .tensor_core import ShapeError, as_matrix, as_vector

DEFAULT_EPS = 1e-6
ETA_FLOOR = 1e-6


class ConfigurationError(ValueError):
    """Invalid rule / variant combination."""


class SingularityError(ZeroDivisionError):
    """Kaczmarz coefficient with a zero key and no stabilizer."""


class Rule(str, Enum):
    LINEAR = "linear"
    RETNET_MAMBA2 = "retnet_mamba2"
    GLA = "gla"
    LONGHORN = "longhorn"
    DELTANET = "deltanet"
    GDN = "gdn"
    KLA = "kla"


DELTA_RULES = frozenset({Rule.LONGHORN, Rule.DELTANET, Rule.GDN, Rule.KLA})
DECAYED_RULES = frozenset({Rule.RETNET_MAMBA2, Rule.GLA, Rule.GDN, Rule.KLA})

NORMALIZATIONS = ("kaczmarz", "none", "key_norm_only", "learned_scalar")
GATINGS = ("dual", "single")
SEQ_FACTORS = (None, "inv", "inv_sqrt", "inv_log")


@dataclass(frozen=True)
class UpdateRule:
    """Rule selector plus the coefficient / gating ablation switches.

    ``normalization`` replaces the write coefficient of a delta rule:
    ``"kaczmarz"`` keeps the selector's own coefficient, ``"none"`` uses the
    bare gate ``eta``, ``"key_norm_only"`` uses ``1/(|k|^2 + eps)`` and
    ``"learned_scalar"`` uses ``scalar/(|k|^2 + eps)``. ``seq_factor``
    multiplies a delta-rule coefficient by ``1/t``, ``1/sqrt(t)`` or
    ``1/log(t+1)`` for absolute position ``t >= 1``. With ``gating="single"``
    the decay is driven by the same gate value as the write (``alpha := eta``).
    """

    kind: Rule = Rule.KLA
    normalization: str = "kaczmarz"
    gating: str = "dual"
    seq_factor: str | None = None
    scalar: float = 1.0

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", Rule(self.kind))
        except ValueError:
            raise ConfigurationError(f"unknown rule {self.kind!r}") from None
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.gating not in GATINGS:
            raise ConfigurationError(f"unknown gating {self.gating!r}")
        if self.seq_factor not in SEQ_FACTORS:
            raise ConfigurationError(f"unknown sequence factor {self.seq_factor!r}")
        is_delta = self.kind in DELTA_RULES
        if self.normalization != "kaczmarz" and not is_delta:
            raise ConfigurationError(
                f"normalization {self.normalization!r} needs a delta rule, got {self.kind.value}"
            )
        if self.seq_factor is not None and not is_delta:
            raise ConfigurationError("sequence factors apply to delta rules only")
        if self.gating == "single" and self.kind not in DECAYED_RULES - {Rule.GLA}:
            raise ConfigurationError("single gating needs a scalar-decayed rule")

    @property
    def is_delta(self) -> bool:
        return self.kind in DELTA_RULES

    @property
    def name(self) -> str:
        parts = [self.kind.value]
        if self.normalization != "kaczmarz":
            parts.append(self.normalization)
        if self.gating != "dual":
            parts.append(self.gating)
        if self.seq_factor:
            parts.append(self.seq_factor)
        return "/".join(parts)


KLA = UpdateRule(Rule.KLA)
GDN = UpdateRule(Rule.GDN)


def as_rule(rule) -> UpdateRule:
    if isinstance(rule, UpdateRule):
        return rule
    return UpdateRule(Rule(rule) if not isinstance(rule, Rule) else rule)


@dataclass(frozen=True)
class TokenInput:
    """One timestep: key, value, query and the two gates.

    ``alpha_vec`` is the per-channel decay used by GLA; other rules ignore it.
    """

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    alpha: float = 1.0
    eta: float = 1.0
    alpha_vec: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "k", as_vector(self.k))
        object.__setattr__(self, "v", as_vector(self.v))
        object.__setattr__(self, "q", as_vector(self.q))
        if self.q.shape != self.k.shape:
            raise ShapeError(f"query {self.q.shape} and key {self.k.shape} differ")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.alpha_vec is not None:
            a = as_vector(self.alpha_vec)
            if a.shape != self.k.shape or np.any((a < 0) | (a > 1)):
                raise ValueError("alpha_vec must match the key size and lie in [0, 1]")
            object.__setattr__(self, "alpha_vec", a)


@dataclass(frozen=True)
class TokenSequence:
    """Stacked tokens: rows of ``k``, ``v``, ``q`` are timesteps."""

    k: np.ndarray
    v: np.ndarray
    q: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    alpha_vec: np.ndarray | None = None
    checked: bool = field(default=True, compare=False)

    def __post_init__(self):
        dtype = np.result_type(self.k, np.float32)
        for name in ("k", "v", "q"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), dtype=dtype, checked=self.checked))
        for name in ("alpha", "eta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=dtype).reshape(-1))
        n = self.k.shape[0]
        if not (self.v.shape[0] == self.q.shape[0] == self.alpha.shape[0] == self.eta.shape[0] == n):
            raise ShapeError("token fields have different lengths")
        if self.q.shape != self.k.shape:
            raise ShapeError(f"queries {self.q.shape} and keys {self.k.shape} differ")
        if self.checked:
            if np.any((self.alpha < 0) | (self.alpha > 1)):
                raise ValueError("alpha must lie in [0, 1]")
            if np.any((self.eta <= 0) | (self.eta > 1)):
                raise ValueError("eta must lie in (0, 1]")
        if self.alpha_vec is not None:
            a = np.asarray(self.alpha_vec, dtype=dtype)
            if a.shape != self.k.shape:
                raise ShapeError("alpha_vec must have the key matrix's shape")
            object.__setattr__(self, "alpha_vec", a)

    def __len__(self) -> int:
        return self.k.shape[0]

    def __iter__(self) -> Iterator[TokenInput]:
        for i in range(len(self)):
            yield self.token(i)

    def token(self, i: int) -> TokenInput:
        av = None if self.alpha_vec is None else self.alpha_vec[i]
        return TokenInput(self.k[i], self.v[i], self.q[i], float(self.alpha[i]), float(self.eta[i]), av)

    def slice(self, start: int, stop: int) -> "TokenSequence":
        av = None if self.alpha_vec is None else self.alpha_vec[start:stop]
        return TokenSequence(
            self.k[start:stop], self.v[start:stop], self.q[start:stop],
            self.alpha[start:stop], self.eta[start:stop], av, checked=False,
        )

    @property
    def d_k(self) -> int:
        return self.k.shape[1]

    @property
    def d_v(self) -> int:
        return self.v.shape[1]

    @classmethod
    def from_tokens(cls, tokens: Iterable[TokenInput]) -> "TokenSequence":
        tokens = list(tokens)
        if not tokens:
            raise ValueError("cannot stack an empty token list")
        av = None
        if any(t.alpha_vec is not None for t in tokens):
            av = np.stack([t.alpha_vec if t.alpha_vec is not None else np.full(t.k.shape, t.alpha) for t in tokens])
        return cls(
            np.stack([t.k for t in tokens]),
            np.stack([t.v for t in tokens]),
            np.stack([t.q for t in tokens]),
            np.array([t.alpha for t in tokens]),
            np.array([t.eta for t in tokens]),
            av,
        )


def as_sequence(tokens) -> TokenSequence:
    if isinstance(tokens, TokenSequence):
        return tokens
    return TokenSequence.from_tokens(tokens)


def random_tokens(
    rng: np.random.Generator,
    length: int,
    d_k: int,
    d_v: int,
    *,
    key_scale: tuple[float, float] = (0.2, 3.0),
    alpha_range: tuple[float, float] = (0.5, 1.0),
    eta_range: tuple[float, float] = (0.05, 1.0),
    dtype=np.float64,
) -> TokenSequence:
    """Random tokens with keys of varied norm, for tests and benchmarks."""
    k = rng.standard_normal((length, d_k))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    k *= rng.uniform(*key_scale, size=(length, 1))
    v = rng.standard_normal((length, d_v))
    q = rng.standard_normal((length, d_k))
    alpha = rng.uniform(*alpha_range, size=length)
    eta = rng.uniform(*eta_range, size=length)
    return TokenSequence(k.astype(dtype), v.astype(dtype), q.astype(dtype), alpha.astype(dtype), eta.astype(dtype))


class StepOutput(NamedTuple):
    o: np.ndarray
    new_state: np.ndarray
    beta: float
    residual_before: np.ndarray
    residual_after: np.ndarray


class SequenceResult(NamedTuple):
    outputs: np.ndarray
    final_state: np.ndarray
    trace: list


def decay_state(s: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * s


def residual(s_tilde: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Prediction error ``v - S~^T k`` of the (decayed) state on key ``k``."""
    if s_tilde.shape != (k.shape[0], v.shape[0]):
        raise ShapeError(f"state {s_tilde.shape} does not fit key {k.shape} / value {v.shape}")
    return v - k @ s_tilde


def kla_coefficient(eta: float, k: np.ndarray, eps: float = DEFAULT_EPS) -> float:
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    denom = float(k @ k) + eps
    if denom == 0.0:
        raise SingularityError("zero key with eps = 0")
    return eta / denom


def readout(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``S^T q / |q|``; a zero query reads out zeros."""
    norm = math.sqrt(float(q @ q))
    if norm == 0.0:
        return np.zeros(s.shape[1], dtype=s.dtype)
    return (q @ s) / norm


def sequence_factor(kind: str | None, t):
    """Position multiplier for the sequence-factor ablation (``t`` is 1-based)."""
    if kind is None:
        return 1.0
    t = np.asarray(t, dtype=np.float64)
    if kind == "inv":
        return 1.0 / t
    if kind == "inv_sqrt":
        return 1.0 / np.sqrt(t)
    if kind == "inv_log":
        return 1.0 / np.log(t + 1.0)
    raise ConfigurationError(f"unknown sequence factor {kind!r}")


def delta_coefficients(rule: UpdateRule, eta, key_norm_sq, eps: float, positions=None):
    """Write coefficient(s) ``beta`` for a delta rule.

    Works elementwise on arrays, so the tokenwise and chunkwise paths share
    it. For Longhorn the returned value is already ``rho``.
    """
    rule = as_rule(rule)
    if not rule.is_delta:
        raise ConfigurationError(f"{rule.kind.value} is not a delta rule")
    if rule.normalization == "none":
        beta = eta
    elif rule.normalization == "key_norm_only":
        beta = 1.0 / (key_norm_sq + eps)
    elif rule.normalization == "learned_scalar":
        beta = rule.scalar / (key_norm_sq + eps)
    elif rule.kind is Rule.KLA:
        beta = eta / (key_norm_sq + eps)
    else:
        beta = eta
    if rule.seq_factor is not None:
        beta = beta * sequence_factor(rule.seq_factor, positions)
    if rule.kind is Rule.LONGHORN:
        beta = beta / (1.0 + beta * key_norm_sq)
    return beta


def divides_by_key_norm(rule: UpdateRule) -> bool:
    if rule.normalization in ("key_norm_only", "learned_scalar"):
        return True
    return rule.kind is Rule.KLA and rule.normalization == "kaczmarz"


def _check_eps(eps: float) -> None:
    if eps < 0:
        raise ValueError(f"eps must be nonnegative, got {eps}")


def _update(rule: UpdateRule, s, k, v, alpha, eta, alpha_vec, eps, t):
    """One state update on raw arrays. Returns (new_state, beta, e, e_plus)."""
    kind = rule.kind
    if rule.gating == "single":
        alpha = eta
    if kind is Rule.LINEAR:
        return s + np.multiply.outer(k, v), 1.0, None, None
    if kind is Rule.RETNET_MAMBA2:
        return alpha * s + eta * np.multiply.outer(k, v), eta, None, None
    if kind is Rule.GLA:
        decay = alpha_vec if alpha_vec is not None else alpha
        return np.asarray(decay)[:, None] * s + np.multiply.outer(k, v), 1.0, None, None
    s_tilde = alpha * s if kind in DECAYED_RULES else s
    nsq = float(k @ k)
    if nsq + eps == 0.0 and divides_by_key_norm(rule):
        raise SingularityError("zero key with eps = 0")
    beta = float(delta_coefficients(rule, eta, nsq, eps, t))
    e = v - k @ s_tilde
    new = s_tilde + np.multiply.outer(beta * k, e)
    return new, beta, e, v - k @ new


def step(rule, s: np.ndarray, x: TokenInput, eps: float = DEFAULT_EPS, *, t: int = 1) -> StepOutput:
    """Apply one token to state ``s`` and read the new state with ``x.q``."""
    rule = as_rule(rule)
    _check_eps(eps)
    if s.shape != (x.k.shape[0], x.v.shape[0]):
        raise ShapeError(f"state {s.shape} does not fit key {x.k.shape} / value {x.v.shape}")
    new, beta, e, e_plus = _update(rule, s, x.k, x.v, x.alpha, x.eta, x.alpha_vec, eps, t)
    if e is None:
        e = e_plus = np.zeros_like(x.v)
    return StepOutput(readout(new, x.q), new, beta, e, e_plus)


def run_sequence(
    rule,
    s0: np.ndarray,
    tokens: TokenSequence | Sequence[TokenInput],
    eps: float = DEFAULT_EPS,
    *,
    trace: bool = False,
    start: int = 1,
) -> SequenceResult:
    """Left fold of :func:`step` over ``tokens``; ``start`` is the absolute
    position of the first token (only the sequence-factor ablation uses it).
    """
    rule = as_rule(rule)
    _check_eps(eps)
    if not isinstance(tokens, TokenSequence) and len(tokens) == 0:
        return SequenceResult(np.zeros((0, s0.shape[1]), dtype=s0.dtype), s0.copy(), [])
    seq = as_sequence(tokens)
    if s0.shape != (seq.d_k, seq.d_v):
        raise ShapeError(f"state {s0.shape} does not fit d_k={seq.d_k}, d_v={seq.d_v}")
    n = len(seq)
    dtype = np.result_type(s0, seq.k)
    out = np.zeros((n, seq.d_v), dtype=dtype)
    qn = np.sqrt(np.einsum("ij,ij->i", seq.q, seq.q))
    s = np.array(s0, dtype=dtype)
    steps = []
    for i in range(n):
        av = None if seq.alpha_vec is None else seq.alpha_vec[i]
        s, beta, e, e_plus = _update(rule, s, seq.k[i], seq.v[i], seq.alpha[i], seq.eta[i], av, eps, start + i)
        if qn[i] > 0:
            out[i] = (seq.q[i] @ s) / qn[i]
        if trace:
            if e is None:
                e = e_plus = np.zeros(seq.d_v, dtype=dtype)
            steps.append(StepOutput(out[i].copy(), s, float(beta), e, e_plus))
    return SequenceResult(out, s, steps)
