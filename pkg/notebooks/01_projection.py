"""
One write, seen as a projection
===============================

A single KLA step against a single GDN step on the same token, then the
residual after relaxed writes and the loss along the write direction.
Run with ``python3 notebooks/01_projection.py``.
"""

# %%
import numpy as np

from kla.recurrence import GDN, KLA, TokenInput, step
from kla.theory import contraction_check, line_search_scan, verify_projection

rng = np.random.default_rng(0)
d_k, d_v = 8, 4
s_prev = rng.standard_normal((d_k, d_v))
k = 2.5 * rng.standard_normal(d_k) / np.sqrt(d_k)  # deliberately not unit norm
v = rng.standard_normal(d_v)
x = TokenInput(k, v, q=k, alpha=0.9, eta=1.0)

# %% With eta = 1 and eps = 0 the KLA write lands exactly on S^T k = v.
kla = step(KLA, s_prev, x, eps=0.0)
gdn = step(GDN, s_prev, x, eps=0.0)
print("|k|^2                 ", float(k @ k))
print("KLA residual after    ", np.abs(kla.residual_after).max())
print("GDN residual after    ", np.abs(gdn.residual_after).max())

# %% The correction is orthogonal to every direction that keeps the constraint.
for rep in verify_projection(0.9 * s_prev, k, v, rng):
    print(f"{rep.name:22s} {rep.max_deviation:.2e}  (tol {rep.tolerance:.0e})")

# %% Relaxed writes shrink the residual by 1 - eta |k|^2 / (|k|^2 + eps).
for eta, eps in [(1.0, 0.0), (0.25, 0.0), (1.0, float(k @ k))]:
    rep = contraction_check(0.9 * s_prev, k, v, eta, eps)
    print(f"eta={eta:<5} eps={eps:<6.3f} factor={rep.details['factor']:.3f}  deviation={rep.max_deviation:.1e}")

# %% The loss along S + tau k e^T is a parabola with its minimum at 1/|k|^2.
nsq = float(k @ k)
ls = line_search_scan(0.9 * s_prev, k, v, np.linspace(0, 2 / nsq, 9))
for tau, loss in zip(ls.taus * nsq, ls.direct):
    print(f"tau*|k|^2={tau:4.2f}  loss={loss:.4f}")
