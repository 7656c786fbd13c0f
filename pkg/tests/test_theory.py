import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kla.recurrence import GDN, KLA, TokenInput, step
from kla.theory import (
    ProximalProblem,
    StepSizeError,
    contraction_check,
    decay_agnostic_check,
    kaczmarz_projection,
    line_search_scan,
    proximal_mu,
    proximal_oracle,
    run_all,
    verify_lagrange,
    verify_projection,
)


def test_feasible_state_is_fixed(rng):
    k = rng.standard_normal(5)
    v = rng.standard_normal(3)
    h = rng.standard_normal((5, 3))
    h -= np.outer(k, k @ h) / (k @ k)  # tangent direction, H^T k = 0
    s = np.outer(k, v) / (k @ k) + h
    assert np.allclose(k @ s, v, atol=1e-14)
    assert np.allclose(kaczmarz_projection(s, k, v), s, rtol=0, atol=1e-14)


def test_projection_from_zero():
    w = np.array([1.0, -2.0, 0.5])
    k = np.array([1.0, 0.0, 0.0, 0.0])
    s = kaczmarz_projection(np.zeros((4, 3)), k, w)
    assert np.array_equal(s, np.outer(k, w))
    assert np.linalg.norm(s) == pytest.approx(np.linalg.norm(w))


def test_projection_checks_random(rng):
    s, k, v = rng.standard_normal((8, 4)), rng.standard_normal(8), rng.standard_normal(4)
    for rep in verify_projection(s, k, v, rng):
        assert rep.passed, rep


def test_gdn_coefficient_fails_projection(rng):
    s, v = rng.standard_normal((8, 4)), rng.standard_normal(4)
    k = rng.standard_normal(8)
    k *= 2.0 / np.linalg.norm(k)
    assert not verify_projection(s, k, v, rng, rule=GDN)[0].passed
    k /= np.linalg.norm(k)
    assert verify_projection(s, k, v, rng, rule=GDN)[0].passed


def test_line_search_values(rng):
    s, k, v = rng.standard_normal((6, 3)), rng.standard_normal(6), rng.standard_normal(3)
    e = v - k @ s
    half = 0.5 * float(e @ e)
    nsq = float(k @ k)
    ls = line_search_scan(s, k, v, [0.0, 1.0 / nsq, 2.0 / nsq])
    assert ls.direct[0] == pytest.approx(half, rel=1e-14)
    assert ls.direct[1] == pytest.approx(0.0, abs=1e-24 + 1e-14 * half)
    assert ls.direct[2] == pytest.approx(half, rel=1e-12)
    assert np.allclose(ls.direct, ls.closed_form, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        line_search_scan(s, k, v, [])
    with pytest.raises(ValueError):
        line_search_scan(s, np.zeros(6), v, [0.0])


def test_proximal_mu_zero_and_large(rng):
    s, k, v = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(3)
    assert np.allclose(proximal_oracle(ProximalProblem(s, k, v, 0.0)).minimizer, s, atol=1e-14)
    big = proximal_oracle(ProximalProblem(s, k, v, 1e6), iters=200_000).minimizer
    assert np.max(np.abs(big - kaczmarz_projection(s, k, v))) < 1e-4
    with pytest.raises(ValueError):
        ProximalProblem(s, k, v, -1.0)
    with pytest.raises(ValueError):
        ProximalProblem(s, k, v, math.nan)


def test_proximal_matches_relaxed_update(rng):
    k = np.array([1.0, 0.0, 0.0])
    s, v = rng.standard_normal((3, 2)), rng.standard_normal(2)
    mu = proximal_mu(0.5, 1.0, 0.0)
    assert mu == 1.0
    res = proximal_oracle(ProximalProblem(s, k, v, mu))
    kla = step(KLA, s, TokenInput(k, v, k, 1.0, 0.5), eps=0.0).new_state
    assert np.max(np.abs(res.minimizer - kla)) <= 1e-6
    assert all(b <= a + 1e-15 for a, b in zip(res.objective_trace, res.objective_trace[1:]))


def test_proximal_step_too_large(rng):
    s, k, v = rng.standard_normal((3, 2)), rng.standard_normal(3) * 3, rng.standard_normal(2)
    with pytest.raises(StepSizeError):
        proximal_oracle(ProximalProblem(s, k, v, 10.0), step_size=1.0)


def test_contraction_factors(rng):
    s, v = rng.standard_normal((4, 3)), rng.standard_normal(3)
    k = rng.standard_normal(4)
    nsq = float(k @ k)
    exact = step(KLA, s, TokenInput(k, v, k, 1.0, 1.0), eps=0.0)
    assert np.max(np.abs(exact.residual_after)) <= 1e-12
    half = contraction_check(s, k, v, 1.0, nsq)
    assert half.details["factor"] == 0.5 and half.passed
    quarter = contraction_check(s, k, v, 0.25, 0.0)
    assert quarter.details["factor"] == pytest.approx(0.75, abs=1e-16) and quarter.passed


def test_lagrange(rng):
    s, v = rng.standard_normal((4, 3)), rng.standard_normal(3)
    k = rng.standard_normal(4)
    feasible = s + np.outer(k, v - k @ s) / (k @ k)
    assert verify_lagrange(feasible, k, v).passed
    unit = k / np.linalg.norm(k)
    e = v - unit @ s
    assert np.allclose(s + np.outer(unit, e), kaczmarz_projection(s, unit, v), atol=1e-12)
    assert verify_lagrange(s, k, v).passed


def test_decay_agnostic(rng):
    s, k, v = rng.standard_normal((6, 3)), rng.standard_normal(6), rng.standard_normal(3)
    assert decay_agnostic_check(s, k, v, rng.uniform(0, 1, 6), rng).passed


def test_run_all_small():
    reps = run_all(20, seed=7)
    assert all(r.passed for r in reps), [r.to_dict() for r in reps if not r.passed]
    assert not all(r.passed for r in run_all(20, seed=7, mutate="gdn"))
    with pytest.raises(ValueError):
        run_all(0)


@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1.0), st.sampled_from([0.0, 1e-6, 0.5, 3.0]))
def test_contraction_property(seed, eta, eps):
    rng = np.random.default_rng(seed)
    d_k, d_v = rng.integers(1, 12, size=2)
    k = rng.standard_normal(d_k) * rng.uniform(0.2, 3.0)
    rep = contraction_check(rng.standard_normal((d_k, d_v)), k, rng.standard_normal(d_v), eta, eps)
    assert rep.passed and rep.details["monotone"]
    assert 0.0 <= rep.details["factor"] < 1.0
