import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kla.tensor_core import (
    ShapeError,
    StructureError,
    as_matrix,
    as_vector,
    diag_from,
    forward_substitution,
    hadamard,
    is_unit_lower_triangular,
    l2_norm_sq,
    matmul,
    outer,
)


def test_matmul_identity_and_zero(rng):
    b = rng.standard_normal((3, 4))
    assert np.array_equal(matmul(np.eye(3), b), b)
    assert not matmul(np.zeros((2, 3)), b).any()


def test_matmul_hand_example():
    assert matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]])).tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_outer_examples():
    assert not outer(np.array([1.0, 2.0]), np.zeros(3)).any()
    w = np.array([5.0, -1.0, 2.0])
    m = outer(np.array([1.0, 0.0]), w)
    assert np.array_equal(m[0], w) and not m[1].any()
    assert outer(np.array([1.0, 2.0]), np.array([3.0])).tolist() == [[3.0], [6.0]]


def test_forward_substitution_examples(rng):
    rhs = rng.standard_normal((4, 3))
    assert np.array_equal(forward_substitution(np.eye(4), rhs), rhs)
    u = forward_substitution(np.array([[1.0, 0.0], [2.0, 1.0]]), np.array([[1.0], [0.0]]))
    assert u.tolist() == [[1.0], [-2.0]]


def test_forward_substitution_random_c8(rng):
    l = np.tril(rng.standard_normal((8, 8)), -1) + np.eye(8)
    rhs = rng.standard_normal((8, 5))
    u = forward_substitution(l, rhs)
    assert np.max(np.abs(l @ u - rhs)) <= 1e-12


def test_forward_substitution_rejects_bad_structure():
    with pytest.raises(StructureError):
        forward_substitution(np.array([[2.0, 0.0], [1.0, 1.0]]), np.ones((2, 1)))
    with pytest.raises(StructureError):
        forward_substitution(np.array([[1.0, 0.5], [0.0, 1.0]]), np.ones((2, 1)))
    # unchecked mode trusts the caller and ignores the upper triangle
    u = forward_substitution(np.array([[1.0, 9.0], [0.0, 1.0]]), np.ones((2, 1)), checked=False)
    assert u.tolist() == [[1.0], [1.0]]


def test_hadamard_diag_norm():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(hadamard(a, np.ones_like(a)), a)
    with pytest.raises(ShapeError):
        hadamard(a, np.ones((3, 2)))
    assert np.array_equal(diag_from(np.array([1.0, 2.0])), np.diag([1.0, 2.0]))
    assert l2_norm_sq(np.zeros(4)) == 0.0
    assert l2_norm_sq(np.array([3.0, 4.0])) == 25.0


def test_checked_construction_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_vector([np.inf])
    assert as_vector([1, 2], dtype=np.float32).dtype == np.float32
    assert np.isnan(as_vector([np.nan], checked=False)[0])


def test_is_unit_lower_triangular():
    assert is_unit_lower_triangular(np.array([[1.0, 0.0], [3.0, 1.0]]))
    assert not is_unit_lower_triangular(np.ones((2, 2)))


@given(st.integers(1, 128), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_forward_substitution_residual_property(c, d, seed):
    r = np.random.default_rng(seed)
    l = np.tril(r.uniform(-1, 1, (c, c)) / np.sqrt(c), -1) + np.eye(c)
    rhs = r.standard_normal((c, d))
    u = forward_substitution(l, rhs)
    assert np.max(np.abs(l @ u - rhs)) <= 1e-11 * max(1.0, np.max(np.abs(u)))


@given(st.integers(0, 2**32 - 1))
def test_matmul_associativity(seed):
    r = np.random.default_rng(seed)
    a, b, c = r.standard_normal((3, 4)), r.standard_normal((4, 5)), r.standard_normal((5, 2))
    left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-10 * max(1.0, np.max(np.abs(left)))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_outer_has_rank_one(dk, dv, seed):
    r = np.random.default_rng(seed)
    m = outer(r.standard_normal(dk), r.standard_normal(dv))
    for i in range(dk - 1):
        for j in range(dv - 1):
            minor = m[i, j] * m[i + 1, j + 1] - m[i, j + 1] * m[i + 1, j]
            assert abs(minor) <= 1e-12
