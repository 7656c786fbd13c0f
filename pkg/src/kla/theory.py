"""Numerical checks of the projection / line-search / proximal / contraction
properties of the Kaczmarz write.

Each check builds the state with the production :func:`kla.recurrence.step`
and compares it against an independent construction: random feasible points
from a pseudo-inverse, random tangent directions, a direct loss evaluation,
plain gradient descent on the proximal objective, or a Lagrange-multiplier
reconstruction. ``rule`` arguments exist so the same checks can be pointed at
a deliberately wrong coefficient (GDN) and shown to fail.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .recurrence import KLA, TokenInput, as_rule, step


class StepSizeError(RuntimeError):
    """Gradient descent increased the objective."""


@dataclass
class TheoryReport:
    name: str
    max_deviation: float
    tolerance: float
    samples: int = 1
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_deviation <= self.tolerance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    @classmethod
    def merge(cls, name: str, reports: list["TheoryReport"]) -> "TheoryReport":
        """Worst case over instances of the same check."""
        worst = max(r.max_deviation for r in reports)
        return cls(name, worst, reports[0].tolerance, sum(r.samples for r in reports))


@dataclass
class ProximalProblem:
    s_tilde: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mu: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu >= 0):
            raise ValueError(f"mu must be finite and nonnegative, got {self.mu}")

    def objective(self, s: np.ndarray) -> float:
        r = self.k @ s - self.v
        d = s - self.s_tilde
        return 0.5 * float(np.sum(d * d)) + 0.5 * self.mu * float(r @ r)

    def gradient(self, s: np.ndarray) -> np.ndarray:
        return (s - self.s_tilde) + self.mu * np.multiply.outer(self.k, self.k @ s - self.v)


def _require_key(k: np.ndarray) -> None:
    if not np.any(k):
        raise ValueError("the projection checks need a nonzero key")


def kaczmarz_projection(s_tilde, k, v, rule=KLA) -> np.ndarray:
    """Unrelaxed write (eta = 1, eps = 0) applied to an already-decayed state."""
    x = TokenInput(k, v, k, alpha=1.0, eta=1.0)
    return step(as_rule(rule), s_tilde, x, eps=0.0).new_state


def random_tangent(rng: np.random.Generator, k: np.ndarray, d_v: int, count: int) -> np.ndarray:
    """``count`` random matrices ``H`` with ``H^T k = 0``."""
    h0 = rng.standard_normal((count, k.shape[0], d_v))
    return h0 - np.einsum("i,cj->cij", k, np.einsum("i,cij->cj", k, h0)) / (k @ k)


def random_feasible(rng: np.random.Generator, k: np.ndarray, v: np.ndarray, count: int) -> np.ndarray:
    """``count`` random states with ``S^T k = v`` built from a pseudo-inverse."""
    m = rng.standard_normal((count, k.shape[0], v.shape[0])) * rng.uniform(0.1, 3.0, size=(count, 1, 1))
    pinv_row = np.linalg.pinv(k[None, :])  # (d_k, 1)
    resid = v[None, :] - np.einsum("i,cij->cj", k, m)
    return m + np.einsum("i,cj->cij", pinv_row[:, 0], resid)


def verify_projection(
    s_tilde, k, v, rng: np.random.Generator, *, n_tangent: int = 100, n_feasible: int = 100, rule=KLA
) -> tuple[TheoryReport, TheoryReport, TheoryReport]:
    """Constraint satisfaction, orthogonality of the correction to the
    constraint's tangent space, and minimum-norm dominance over random
    feasible points."""
    _require_key(k)
    s_t = kaczmarz_projection(s_tilde, k, v, rule)
    delta = s_t - s_tilde
    constraint = float(np.max(np.abs(k @ s_t - v)))

    tangents = random_tangent(rng, k, v.shape[0], n_tangent)
    ortho = float(np.max(np.abs(np.einsum("ij,cij->c", delta, tangents)))) if n_tangent else 0.0

    feasible = random_feasible(rng, k, v, n_feasible)
    own = np.linalg.norm(delta)
    others = np.linalg.norm(feasible - s_tilde[None], axis=(1, 2))
    excess = float(max(0.0, np.max(own - others))) if n_feasible else 0.0
    return (
        TheoryReport("constraint", constraint, 1e-12),
        TheoryReport("tangent_orthogonality", ortho, 1e-10, n_tangent),
        TheoryReport("min_norm", excess, 1e-10, n_feasible),
    )


class LineSearch(NamedTuple):
    taus: np.ndarray
    direct: np.ndarray
    closed_form: np.ndarray
    tau_star: float
    tau_star_empirical: float


def line_search_scan(s_tilde, k, v, grid) -> LineSearch:
    """Loss along ``S(tau) = S~ + tau k e^T``, evaluated directly and from
    ``0.5 (1 - tau |k|^2)^2 |e|^2``."""
    _require_key(k)
    taus = np.asarray(grid, dtype=np.float64)
    if taus.size == 0:
        raise ValueError("empty tau grid")
    e = v - k @ s_tilde
    direct = np.empty_like(taus)
    for i, tau in enumerate(taus):
        s = s_tilde + tau * np.multiply.outer(k, e)
        r = k @ s - v
        direct[i] = 0.5 * float(r @ r)
    nsq = float(k @ k)
    closed = 0.5 * (1.0 - taus * nsq) ** 2 * float(e @ e)
    return LineSearch(taus, direct, closed, 1.0 / nsq, float(taus[np.argmin(direct)]))


class ProximalResult(NamedTuple):
    minimizer: np.ndarray
    analytic: np.ndarray
    objective_trace: list
    iterations: int


def proximal_oracle(p: ProximalProblem, step_size: float | None = None, iters: int = 10_000, grad_tol: float = 1e-10) -> ProximalResult:
    """Gradient descent on ``0.5|S - S~|^2 + mu/2 |S^T k - v|^2`` from ``S~``."""
    nsq = float(p.k @ p.k)
    lipschitz = 1.0 + p.mu * nsq
    if step_size is None:
        step_size = 0.5 / lipschitz
    s = p.s_tilde.copy()
    trace = [p.objective(s)]
    n = 0
    for n in range(1, iters + 1):
        g = p.gradient(s)
        if np.linalg.norm(g) <= grad_tol:
            n -= 1
            break
        s = s - step_size * g
        f = p.objective(s)
        if f > trace[-1] + 1e-12 * max(1.0, abs(trace[-1])):
            raise StepSizeError(f"objective rose from {trace[-1]:.6g} to {f:.6g} at iteration {n}")
        trace.append(f)
    e = p.v - p.k @ p.s_tilde
    analytic = p.s_tilde + (p.mu / lipschitz) * np.multiply.outer(p.k, e)
    return ProximalResult(s, analytic, trace, n)


def proximal_mu(eta: float, key_norm_sq: float, eps: float) -> float:
    return eta / ((1.0 - eta) * key_norm_sq + eps)


def contraction_check(s_tilde, k, v, eta: float, eps: float, rule=KLA) -> TheoryReport:
    x = TokenInput(k, v, k, alpha=1.0, eta=eta)
    out = step(as_rule(rule), s_tilde, x, eps=eps)
    nsq = float(k @ k)
    factor = 1.0 - eta * nsq / (nsq + eps)
    dev = float(np.max(np.abs(out.residual_after - factor * out.residual_before)))
    loss_before = 0.5 * float(out.residual_before @ out.residual_before)
    loss_after = 0.5 * float(out.residual_after @ out.residual_after)
    return TheoryReport(
        "contraction",
        dev,
        1e-12,
        details={"factor": factor, "loss_before": loss_before, "loss_after": loss_after,
                 "monotone": loss_after <= loss_before},
    )


def verify_lagrange(s_tilde, k, v, rule=KLA) -> TheoryReport:
    """Rebuild the projection as ``S~ - k lam^T`` with ``lam = -e/|k|^2``."""
    _require_key(k)
    e = v - k @ s_tilde
    lam = -e / float(k @ k)
    s = s_tilde - np.multiply.outer(k, lam)
    stationarity = (s - s_tilde) + np.multiply.outer(k, lam)
    dev = max(
        float(np.max(np.abs(s - kaczmarz_projection(s_tilde, k, v, rule)))),
        float(np.max(np.abs(stationarity))),
        float(np.max(np.abs(k @ s - v))),
    )
    return TheoryReport("lagrange", dev, 1e-12)


def decay_agnostic_check(s_prev, k, v, alpha_vec, rng: np.random.Generator) -> TheoryReport:
    """Projection properties with a per-channel decay producing ``S~``."""
    s_tilde = alpha_vec[:, None] * s_prev
    reports = verify_projection(s_tilde, k, v, rng, n_tangent=20, n_feasible=20)
    return TheoryReport("decay_agnostic", max(r.max_deviation for r in reports), 1e-10)


def _instance(rng: np.random.Generator, d_max: int):
    d_k = int(rng.integers(1, d_max + 1))
    d_v = int(rng.integers(1, d_max + 1))
    s_prev = rng.standard_normal((d_k, d_v))
    alpha = rng.uniform(0.0, 1.0)
    k = rng.standard_normal(d_k)
    k *= rng.uniform(0.3, 3.0) / np.linalg.norm(k)
    v = rng.standard_normal(d_v)
    return alpha * s_prev, k, v, s_prev


def projection_suite(n: int = 1000, seed: int = 0, *, d_max: int = 32, rule=KLA, n_tangent: int = 100, n_feasible: int = 100) -> list[TheoryReport]:
    rng = np.random.default_rng(seed)
    parts: list[list[TheoryReport]] = [[], [], []]
    for _ in range(n):
        s_tilde, k, v, _ = _instance(rng, d_max)
        for bucket, rep in zip(parts, verify_projection(s_tilde, k, v, rng, n_tangent=n_tangent, n_feasible=n_feasible, rule=rule)):
            bucket.append(rep)
    return [TheoryReport.merge(f"projection/{b[0].name}", b) for b in parts]


def proximal_suite(n: int = 100, seed: int = 1, *, d_max: int = 16) -> TheoryReport:
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_analytic = 0.0
    for _ in range(n):
        s_tilde, k, v, _ = _instance(rng, d_max)
        eta = rng.uniform(0.01, 0.99)
        eps = float(rng.choice([0.0, 1e-6, rng.uniform(0.0, 2.0)]))
        nsq = float(k @ k)
        mu = proximal_mu(eta, nsq, eps)
        res = proximal_oracle(ProximalProblem(s_tilde, k, v, mu))
        kla_state = step(KLA, s_tilde, TokenInput(k, v, k, alpha=1.0, eta=eta), eps=eps).new_state
        worst = max(worst, float(np.linalg.norm(res.minimizer - kla_state)))
        worst_analytic = max(worst_analytic, float(np.linalg.norm(res.analytic - kla_state)))
    return TheoryReport("proximal", worst, 1e-6, n, {"analytic_vs_kla": worst_analytic})


def contraction_suite(n: int = 1000, seed: int = 2, *, d_max: int = 32) -> TheoryReport:
    rng = np.random.default_rng(seed)
    worst = 0.0
    monotone = True
    for _ in range(n):
        s_tilde, k, v, _ = _instance(rng, d_max)
        eta = float(rng.uniform(1e-6, 1.0)) if rng.random() > 0.1 else 1.0
        eps = float(rng.choice([0.0, 1e-6, rng.uniform(0.0, 5.0)]))
        rep = contraction_check(s_tilde, k, v, eta, eps)
        worst = max(worst, rep.max_deviation)
        monotone &= bool(rep.details["monotone"])
    # a loss increase counts as an infinite deviation
    return TheoryReport("contraction", worst if monotone else math.inf, 1e-12, n, {"loss_monotone": monotone})


def lagrange_suite(n: int = 1000, seed: int = 3, *, d_max: int = 32) -> TheoryReport:
    rng = np.random.default_rng(seed)
    reps = [verify_lagrange(*_instance(rng, d_max)[:3]) for _ in range(n)]
    return TheoryReport.merge("lagrange", reps)


def line_search_suite(n: int = 1000, seed: int = 4, *, d_max: int = 32, grid_points: int = 401) -> TheoryReport:
    """Direct vs closed-form loss, argmin bracketing and a parabola fit."""
    rng = np.random.default_rng(seed)
    worst_formula = worst_fit = 0.0
    bracketed = True
    for _ in range(n):
        s_tilde, k, v, _ = _instance(rng, d_max)
        tau_star = 1.0 / float(k @ k)
        grid = np.linspace(0.0, 2.0 * tau_star, grid_points)
        ls = line_search_scan(s_tilde, k, v, grid)
        scale = max(1.0, float(ls.direct.max()))
        worst_formula = max(worst_formula, float(np.max(np.abs(ls.direct - ls.closed_form))) / scale)
        coeffs = np.polyfit(ls.taus / tau_star, ls.direct, 2)
        fit = np.polyval(coeffs, ls.taus / tau_star)
        worst_fit = max(worst_fit, float(np.max(np.abs(fit - ls.direct))) / scale)
        bracketed &= bool(abs(ls.tau_star_empirical - tau_star) <= grid[1] - grid[0])
    dev = max(worst_formula, worst_fit) if bracketed else math.inf
    return TheoryReport("projection/line_search", dev, 1e-10, n, {"formula": worst_formula, "parabola_fit": worst_fit, "bracketed": bracketed})


def decay_agnostic_suite(n: int = 200, seed: int = 5, *, d_max: int = 16) -> TheoryReport:
    rng = np.random.default_rng(seed)
    reps = []
    for _ in range(n):
        _, k, v, s_prev = _instance(rng, d_max)
        reps.append(decay_agnostic_check(s_prev, k, v, rng.uniform(0, 1, size=k.shape[0]), rng))
    return TheoryReport.merge("decay_agnostic", reps)


def run_all(samples: int = 1000, seed: int = 0, *, mutate: str | None = None) -> list[TheoryReport]:
    """Full suite. ``mutate="gdn"`` swaps the write coefficient for ``eta``
    in the projection checks, which must then fail."""
    if samples < 1:
        raise ValueError("samples must be positive")
    rule = KLA if mutate is None else as_rule(mutate)
    reports = projection_suite(samples, seed, rule=rule)
    reports.append(line_search_suite(samples, seed + 4))
    reports.append(proximal_suite(max(1, samples // 10), seed + 1))
    reports.append(contraction_suite(samples, seed + 2))
    reports.append(lagrange_suite(samples, seed + 3))
    reports.append(decay_agnostic_suite(max(1, samples // 5), seed + 5))
    return reports
