"""Prefill and decode timing for the tokenwise and chunkwise paths.

Only ratios and scaling are meaningful here: KLA against GDN at equal
length, decode cost at long against short context, prefill time at ``2L``
against ``L``. Timings use the monotonic ``perf_counter`` clock, discard
warmup runs and report the median of the timed repetitions.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .chunk import DEFAULT_CHUNK, run_chunked
from .recurrence import DEFAULT_EPS, Rule, as_rule, random_tokens, run_sequence

CSV_FIELDS = ["rule", "path", "length", "precision", "reps", "min_ms", "median_ms", "max_ms", "tok_per_s", "tpot_ms"]
PRECISIONS = {"float64": np.float64, "float32": np.float32}
MIN_REPS = 5
WARMUP = 2


@dataclass
class BenchResult:
    rule: str
    path: str
    length: int
    precision: str
    reps: int
    min_ms: float
    median_ms: float
    max_ms: float
    tok_per_s: float
    tpot_ms: float

    def row(self) -> dict:
        return asdict(self)


def time_call(fn: Callable[[], object], reps: int = MIN_REPS, warmup: int = WARMUP) -> list[float]:
    """Wall times in ms of ``reps`` calls after ``warmup`` discarded calls."""
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return times


def _result(rule, path, length, precision, times, tokens) -> BenchResult:
    med = statistics.median(times)
    per_tok = med / tokens
    return BenchResult(
        rule=as_rule(rule).name,
        path=path,
        length=length,
        precision=precision,
        reps=len(times),
        min_ms=min(times),
        median_ms=med,
        max_ms=max(times),
        tok_per_s=tokens / (med / 1e3) if med > 0 else math.inf,
        tpot_ms=per_tok,
    )


def _inputs(length: int, d_k: int, d_v: int, precision: str, seed: int):
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    rng = np.random.default_rng(seed)
    return random_tokens(rng, length, d_k, d_v, dtype=PRECISIONS[precision])


def _prefill_fn(rule, length, d_k, d_v, chunk_len, path, precision, eps, seed):
    seq = _inputs(length, d_k, d_v, precision, seed)
    s0 = np.zeros((d_k, d_v), dtype=PRECISIONS[precision])
    if path == "chunkwise":
        return lambda: run_chunked(rule, s0, seq, chunk_len, eps, checked=False)
    if path == "tokenwise":
        return lambda: run_sequence(rule, s0, seq, eps)
    raise ValueError(f"unknown path {path!r}")


def prefill_sweep(
    rules,
    lengths=(1024, 2048, 4096, 8192),
    d_k: int = 64,
    d_v: int = 64,
    chunk_len: int = DEFAULT_CHUNK,
    reps: int = MIN_REPS,
    *,
    path: str = "chunkwise",
    precision: str = "float64",
    eps: float = DEFAULT_EPS,
    seed: int = 0,
) -> dict[str, list[BenchResult]]:
    """Median prefill time for every (rule, length); ``L = 0`` is skipped.

    Repetitions are interleaved round-robin across all cells, so slow drift
    in machine load hits every cell alike and ratios between cells stay
    stable even when absolute times wander.
    """
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    rules = [as_rule(r) for r in rules]
    cells = [(r, n) for r in rules for n in lengths if n > 0]
    fns = [_prefill_fn(r, n, d_k, d_v, chunk_len, path, precision, eps, seed) for r, n in cells]
    times = [[] for _ in cells]
    for i in range(WARMUP + reps):
        for fn, bucket in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            if i >= WARMUP:
                bucket.append((time.perf_counter() - t0) * 1e3)
    out = {r.name: [] for r in rules}
    for (r, n), ts in zip(cells, times):
        out[r.name].append(_result(r, path, n, precision, ts, n))
    return out


def bench_prefill(
    rule=Rule.KLA,
    lengths=(1024, 2048, 4096, 8192),
    d_k: int = 64,
    d_v: int = 64,
    chunk_len: int = DEFAULT_CHUNK,
    reps: int = MIN_REPS,
    **kw,
) -> list[BenchResult]:
    """Median prefill time per length for one rule."""
    rule = as_rule(rule)
    return prefill_sweep([rule], lengths, d_k, d_v, chunk_len, reps, **kw)[rule.name]


class DecodeState:
    """Recurrent state plus preallocated scratch for single-token steps.

    :meth:`step` allocates nothing: every intermediate lands in a buffer
    created here. The state size depends on ``d_k`` and ``d_v`` only.
    """

    def __init__(self, s: np.ndarray, rule=Rule.KLA, eps: float = DEFAULT_EPS):
        rule = as_rule(rule)
        if rule.kind not in (Rule.GDN, Rule.KLA) or rule.normalization != "kaczmarz" or rule.seq_factor:
            raise ValueError("decode benchmark supports plain gdn and kla")
        self.kla = rule.kind is Rule.KLA
        self.single = rule.gating == "single"
        self.eps = eps
        self.s = np.array(s, copy=True)
        d_k, d_v = s.shape
        dt = s.dtype
        self.pred = np.empty(d_v, dt)
        self.kcol = np.empty((d_k, 1), dt)
        self.erow = np.empty((1, d_v), dt)
        self.k_flat = self.kcol.reshape(d_k)
        self.e_flat = self.erow.reshape(d_v)
        self.o = np.empty(d_v, dt)
        self.outer = np.empty((d_k, d_v), dt)
        # scalar slots as 1-element views, made once
        self.beta = np.empty(1, dt)
        self.beta0 = self.beta.reshape(())
        self.qn = np.empty(1, dt)
        self.qn0 = self.qn.reshape(())
        self.eps_arr = np.full(1, eps, dt)
        self.tiny = np.full(1, np.finfo(dt).tiny, dt)

    def step(self, k, v, q, alpha, eta) -> np.ndarray:
        """One token; ``alpha`` and ``eta`` are 0-d arrays. Returns the output buffer.

        Arguments are passed positionally throughout: keyword arguments would
        build a dict per call.
        """
        s, beta = self.s, self.beta
        np.multiply(s, eta if self.single else alpha, s)
        np.copyto(self.k_flat, k)
        np.matmul(k, s, self.pred)
        np.subtract(v, self.pred, self.e_flat)
        if self.kla:
            np.matmul(k, k, self.beta0)
            np.add(beta, self.eps_arr, beta)
            np.divide(eta, beta, beta)
        else:
            np.copyto(beta, eta)
        np.matmul(self.kcol, self.erow, self.outer)
        np.multiply(self.outer, beta, self.outer)
        np.add(s, self.outer, s)
        np.matmul(q, s, self.o)
        np.matmul(q, q, self.qn0)
        np.sqrt(self.qn, self.qn)
        # a zero query gives o = 0 already; the floor only avoids 0/0
        np.maximum(self.qn, self.tiny, self.qn)
        np.divide(self.o, self.qn, self.o)
        return self.o


def prepare_decode(rule, context: int, d_k: int, d_v: int, chunk_len: int, precision: str, seed: int, eps=DEFAULT_EPS) -> DecodeState:
    """Prefill ``context`` random tokens chunkwise and wrap the final state."""
    dt = PRECISIONS[precision]
    s0 = np.zeros((d_k, d_v), dtype=dt)
    if context > 0:
        s0 = run_chunked(rule, s0, _inputs(context, d_k, d_v, precision, seed), chunk_len, eps, checked=False).final_state
    return DecodeState(s0, rule, eps)


def _decode_inputs(gen_tokens: int, d_k: int, d_v: int, precision: str, seed: int):
    seq = _inputs(gen_tokens, d_k, d_v, precision, seed + 1)
    dt = PRECISIONS[precision]
    alphas = [np.asarray(a, dtype=dt) for a in seq.alpha]
    etas = [np.asarray(e, dtype=dt) for e in seq.eta]
    return seq, alphas, etas


def decode_loop(state: DecodeState, seq, alphas, etas) -> None:
    for i in range(len(alphas)):
        state.step(seq.k[i], seq.v[i], seq.q[i], alphas[i], etas[i])


def bench_decode(
    rule=Rule.KLA,
    contexts=(1024, 32768),
    gen_tokens: int = 256,
    reps: int = MIN_REPS,
    d_k: int = 64,
    d_v: int = 64,
    chunk_len: int = DEFAULT_CHUNK,
    *,
    precision: str = "float64",
    eps: float = DEFAULT_EPS,
    seed: int = 0,
) -> list[BenchResult]:
    """Per-token decode cost after a prefill of each context length.

    Every repetition restarts from the prefilled state, so the timed work is
    identical across repetitions; repetitions alternate between contexts.
    """
    if gen_tokens < 1:
        raise ValueError("gen_tokens must be positive")
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    seq, alphas, etas = _decode_inputs(gen_tokens, d_k, d_v, precision, seed)
    states = [prepare_decode(rule, ctx, d_k, d_v, chunk_len, precision, seed, eps) for ctx in contexts]
    starts = [st.s.copy() for st in states]
    times = [[] for _ in contexts]
    for i in range(WARMUP + reps):
        for st, s_start, bucket in zip(states, starts, times):
            np.copyto(st.s, s_start)
            t0 = time.perf_counter()
            decode_loop(st, seq, alphas, etas)
            if i >= WARMUP:
                bucket.append((time.perf_counter() - t0) * 1e3)
    return [_result(rule, "decode", ctx, precision, ts, gen_tokens) for ctx, ts in zip(contexts, times)]


@dataclass
class AllocationReport:
    peak_bytes: int  # transient high-water mark above the starting usage
    retained_bytes: int  # still held after the loop
    smallest_array_bytes: int  # one d_v vector at this precision

    @property
    def clean(self) -> bool:
        """No retained memory and no room in the peak for even one vector
        buffer, so the loop creates no arrays. numpy's ufunc calls keep a fixed
        scratch of about 1 KB regardless of shapes, which is why the check
        runs at a width where a single vector is larger than that."""
        return self.retained_bytes <= 0 and self.peak_bytes < self.smallest_array_bytes


def decode_allocations(rule=Rule.KLA, steps: int = 64, d_k: int = 512, d_v: int = 512, precision: str = "float64", seed: int = 0) -> AllocationReport:
    """Trace memory over ``steps`` decode steps after a warmup pass."""
    state = prepare_decode(rule, 8, d_k, d_v, DEFAULT_CHUNK, precision, seed)
    seq, alphas, etas = _decode_inputs(steps, d_k, d_v, precision, seed)
    # bind every per-step argument up front so the loop only iterates a list
    args = list(zip(list(seq.k), list(seq.v), list(seq.q), alphas, etas))
    step = state.step
    for a in args:
        step(*a)
    started = tracemalloc.is_tracing()
    if not started:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        before, _ = tracemalloc.get_traced_memory()
        for a in args:
            step(*a)
        after, peak = tracemalloc.get_traced_memory()
    finally:
        if not started:
            tracemalloc.stop()
    return AllocationReport(peak - before, after - before, d_v * np.dtype(PRECISIONS[precision]).itemsize)


def write_csv(results: list[BenchResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def read_csv(path) -> list[BenchResult]:
    conv = {"length": int, "reps": int}
    with open(path, newline="", encoding="utf-8") as f:
        return [
            BenchResult(**{k: conv.get(k, float)(v) if k not in ("rule", "path", "precision") else v for k, v in r.items()})
            for r in csv.DictReader(f)
        ]


def median_ratio(a: list[BenchResult], b: list[BenchResult]) -> list[float]:
    """Per-length ``median(a) / median(b)`` for results sharing a length."""
    by_len = {r.length: r for r in b}
    return [r.median_ms / by_len[r.length].median_ms for r in a if r.length in by_len]


def scaling_ratios(results: list[BenchResult]) -> list[float]:
    """``time(2L) / time(L)`` for every length whose double is also present."""
    by_len = {r.length: r.median_ms for r in results}
    return [by_len[2 * n] / by_len[n] for n in sorted(by_len) if 2 * n in by_len]
