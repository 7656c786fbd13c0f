"""Kaczmarz-normalized delta-rule linear attention in numpy.

Modules: :mod:`kla.tensor_core` (checked linear-algebra helpers),
:mod:`kla.recurrence` (tokenwise rules), :mod:`kla.chunk` (chunkwise and WY
paths), :mod:`kla.theory` (numerical checks of the projection view),
:mod:`kla.autodiff` (tape, toy model, training), :mod:`kla.tasks`
(synthetic tasks), :mod:`kla.bench` (timing) and :mod:`kla.cli`.
"""

import os as _os

# KLA_THREADS caps BLAS workers; it only takes effect if set before numpy loads.
_threads = _os.environ.get("KLA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .recurrence import GDN, KLA, Rule, UpdateRule, run_sequence, step  # noqa: E402
from .chunk import run_chunked, run_wy  # noqa: E402

__all__ = ["GDN", "KLA", "Rule", "UpdateRule", "run_sequence", "step", "run_chunked", "run_wy"]
__version__ = "0.1.0"
