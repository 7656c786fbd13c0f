"""
Prefill and decode timing
=========================

Ratios only: KLA against GDN at equal length, prefill at 2L against L and
decode cost after a long against a short prefill.
"""

# %%
from kla import bench

pre = bench.prefill_sweep(["gdn", "kla"], (512, 1024, 2048), d_k=32, d_v=32, reps=5)
print("kla/gdn prefill ", [round(r, 2) for r in bench.median_ratio(pre["kla"], pre["gdn"])])
print("scaling 2L/L    ", [round(r, 2) for r in bench.scaling_ratios(pre["kla"])])

# %%
short, long_ = bench.bench_decode("kla", (1024, 16384), gen_tokens=128, d_k=32, d_v=32)
print(f"decode tpot {short.tpot_ms * 1e3:.1f} us vs {long_.tpot_ms * 1e3:.1f} us")
print("allocations", bench.decode_allocations("kla", steps=32))
