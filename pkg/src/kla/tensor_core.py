"""Dense linear-algebra helpers shared by every kernel.

Matrices and vectors are plain ``numpy.ndarray`` objects. The helpers here
add shape checking with readable errors, an optional finiteness check, and a
row-oriented forward substitution for unit-lower-triangular systems.

Verification code runs in float64. Benchmarks may pass ``checked=False`` and
float32 inputs so that validation does not show up in timings.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class StructureError(ValueError):
    """A matrix does not have the structure an operation requires."""


def as_matrix(data, *, dtype=DEFAULT_DTYPE, checked: bool = True) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if checked and not np.all(np.isfinite(a)):
        raise ValueError("matrix contains NaN or Inf")
    return a


def as_vector(data, *, dtype=DEFAULT_DTYPE, checked: bool = True) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {a.shape}")
    if checked and not np.all(np.isfinite(a)):
        raise ValueError("vector contains NaN or Inf")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def outer(k: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Rank-one matrix ``k e^T``."""
    return np.multiply.outer(k, e)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def diag_from(v: np.ndarray) -> np.ndarray:
    return np.diag(np.asarray(v))


def l2_norm_sq(v: np.ndarray) -> float:
    v = np.asarray(v)
    return float(v @ v)


def is_unit_lower_triangular(l: np.ndarray) -> bool:
    return (
        l.ndim == 2
        and l.shape[0] == l.shape[1]
        and bool(np.all(np.diag(l) == 1.0))
        and not np.any(np.triu(l, 1))
    )


def forward_substitution(l: np.ndarray, rhs: np.ndarray, *, checked: bool = True) -> np.ndarray:
    """Solve ``l @ u = rhs`` for unit-lower-triangular ``l``.

    Rows are resolved top to bottom; the diagonal is never read, so the
    system cannot be singular. ``rhs`` may be a matrix (C x d) or a vector.
    """
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeError(f"triangular factor must be square, got {l.shape}")
    if rhs.shape[0] != l.shape[0]:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, factor is {l.shape}")
    if checked and not is_unit_lower_triangular(l):
        raise StructureError("matrix is not unit-lower-triangular")
    u = np.array(rhs, dtype=np.result_type(l, rhs), copy=True)
    for i in range(1, l.shape[0]):
        u[i] -= l[i, :i] @ u[:i]
    return u
