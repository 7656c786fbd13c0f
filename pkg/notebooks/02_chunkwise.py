"""
Tokenwise, chunkwise and WY execution
=====================================

The same random sequence run three ways. Only the write coefficient differs
between GDN and KLA, so both share the chunk solver.
"""

# %%
import numpy as np

from kla.chunk import build_artifacts, run_chunked, run_wy, verify_combined_wy, wy_build
from kla.recurrence import GDN, KLA, random_tokens, run_sequence

rng = np.random.default_rng(1)
seq = random_tokens(rng, 257, 16, 16, key_scale=(0.2, 1.4))
s0 = np.zeros((16, 16))

# %% Decay between positions, built from products (no division by gamma).
art = build_artifacts(seq.slice(0, 4))
print(np.round(art.a_full, 3))

# %%
for rule in (GDN, KLA):
    ref = run_sequence(rule, s0, seq)
    for c in (1, 16, 64):
        ch = run_chunked(rule, s0, seq, c)
        wy = run_wy(rule, s0, seq, c)
        dev = max(np.abs(ch.outputs - ref.outputs).max(), np.abs(wy.outputs - ref.outputs).max())
        print(f"{rule.name:4s} C={c:3d}  max |chunk - token|, |wy - token| = {dev:.1e}")

# %% WY products against the per-token factors multiplied out.
r = wy_build(s0, seq.slice(0, 32))
print("P_i WY vs direct", max(np.abs(a - b).max() for a, b in zip(r.p_list, r.p_direct)))
print("combined WY     ", verify_combined_wy(rng.standard_normal((16, 16)), seq.slice(0, 32)).max_deviation)
