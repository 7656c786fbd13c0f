"""Synthetic sequence tasks: MQAR, single-needle retrieval, palindrome, stack.

All tasks share a token layout with two reserved ids, ``PAD = 0`` and
``SEP = 1``. A sample is three equal-length arrays: ``input_ids``,
``target_ids`` and ``loss_mask``; targets are only meaningful where the mask
is set (they hold ``PAD`` elsewhere). Scoring is per position, so a model's
output at position ``t`` is compared with ``target_ids[t]``.

Layouts::

    mqar        k1 v1 k2 v2 ... kN vN [PAD gap] SEP q1 q2 ... qM [PAD tail]
                value of q_j scored at q_j
    sniah       d d d k v d d ... d SEP k        value scored at the final k
    palindrome  x1 ... xn SEP xn ... x1 [PAD]    next echoed token scored
                at each echo except the last; x_n (first echo) never scored
    stack       PUSH s t | POP s ... [PAD]       top of stack s scored at the
                stack id of each POP

Every sample is drawn from its own generator seeded with ``(seed, split,
index)``, so datasets are reproducible and can be built in any order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

PAD = 0
SEP = 1
N_SPECIAL = 2

TASKS = ("mqar", "sniah", "palindrome", "stack")
SPLITS = {"train": 20000, "valid": 2000, "test": 2000}
EXTRAPOLATION_FACTORS = (1, 2, 4, 8)
FORMAT_VERSION = 1


class TaskConfigError(ValueError):
    """Infeasible task configuration."""


@dataclass
class TaskConfig:
    """Generator settings. ``length`` is the base length; the effective
    length is ``length * factor``. Pair / needle / stack counts stay fixed
    when ``factor`` grows."""

    task: str = "mqar"
    length: int = 256
    vocab: int = 8192
    num_pairs: int = 32
    num_queries: int | None = None
    num_stacks: int = 4
    seq_len: int | None = None  # palindrome: tokens to reverse (default: fills the length)
    mqar_layout: str = "tail"
    factor: int = 1
    seed: int = 42

    def __post_init__(self):
        if self.task not in TASKS:
            raise TaskConfigError(f"unknown task {self.task!r}")
        if self.factor < 1:
            raise TaskConfigError("extrapolation factor must be >= 1")
        if self.mqar_layout not in ("tail", "gap"):
            raise TaskConfigError(f"unknown MQAR layout {self.mqar_layout!r}")

    @property
    def total_length(self) -> int:
        return self.length * self.factor

    @property
    def queries(self) -> int:
        return self.num_pairs if self.num_queries is None else self.num_queries

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskSample:
    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray

    def __post_init__(self):
        n = len(self.input_ids)
        if len(self.target_ids) != n or len(self.loss_mask) != n:
            raise ValueError("input, target and mask lengths differ")

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_ids": [int(x) for x in self.input_ids],
                "target_ids": [int(x) for x in self.target_ids],
                "loss_mask": [int(x) for x in self.loss_mask],
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TaskSample":
        d = json.loads(line)
        return cls(
            np.asarray(d["input_ids"], dtype=np.int64),
            np.asarray(d["target_ids"], dtype=np.int64),
            np.asarray(d["loss_mask"], dtype=bool),
        )


@dataclass
class Dataset:
    """Equal-length samples stacked into ``(N, L)`` arrays."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    config: TaskConfig | None = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    def __getitem__(self, i) -> TaskSample:
        return TaskSample(self.input_ids[i], self.target_ids[i], self.loss_mask[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.input_ids[idx], self.target_ids[idx], self.loss_mask[idx], self.config, self.split)

    @classmethod
    def from_samples(cls, samples: Iterable[TaskSample], config=None, split="train") -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.stack([s.input_ids for s in samples]).astype(np.int64),
            np.stack([s.target_ids for s in samples]).astype(np.int64),
            np.stack([s.loss_mask for s in samples]).astype(bool),
            config,
            split,
        )


# -- vocabulary partitions ------------------------------------------------------


def _content(vocab: int) -> int:
    return vocab - N_SPECIAL


def mqar_vocab(vocab: int) -> tuple[range, range]:
    """Keys from the first half of the content ids, values from the second."""
    half = _content(vocab) // 2
    return range(N_SPECIAL, N_SPECIAL + half), range(N_SPECIAL + half, N_SPECIAL + 2 * half)


def sniah_vocab(vocab: int) -> tuple[range, range, range]:
    """Needle keys, needle values, distractors (pairwise disjoint thirds)."""
    third = _content(vocab) // 3
    lo = N_SPECIAL
    return range(lo, lo + third), range(lo + third, lo + 2 * third), range(lo + 2 * third, lo + 3 * third)


PUSH = 2
POP = 3


def stack_vocab(vocab: int, num_stacks: int) -> tuple[range, range]:
    """Stack ids and pushable element ids (after PAD, SEP, PUSH, POP)."""
    ids = range(4, 4 + num_stacks)
    return ids, range(4 + num_stacks, vocab)


# -- generators -------------------------------------------------------------------


def _blank(length: int):
    return np.zeros(length, np.int64), np.zeros(length, np.int64), np.zeros(length, bool)


def mqar_sample(cfg: TaskConfig, rng: np.random.Generator) -> TaskSample:
    keys, values = mqar_vocab(cfg.vocab)
    n, m, length = cfg.num_pairs, cfg.queries, cfg.total_length
    if n < 1 or m < 1:
        raise TaskConfigError("MQAR needs at least one pair and one query")
    if n > len(keys):
        raise TaskConfigError(f"{n} pairs exceed the {len(keys)} available keys")
    if m > n:
        raise TaskConfigError("more queries than pairs")
    if 2 * n + 1 + m > length:
        raise TaskConfigError(f"{n} pairs and {m} queries do not fit length {length}")
    inp, tgt, mask = _blank(length)
    k = rng.choice(np.asarray(keys), size=n, replace=False)
    v = rng.choice(np.asarray(values), size=n, replace=True)
    inp[0 : 2 * n : 2] = k
    inp[1 : 2 * n : 2] = v
    sep = 2 * n if cfg.mqar_layout == "tail" else length - m - 1
    inp[sep] = SEP
    order = rng.permutation(n)[:m]
    pos = np.arange(sep + 1, sep + 1 + m)
    inp[pos] = k[order]
    tgt[pos] = v[order]
    mask[pos] = True
    return TaskSample(inp, tgt, mask)


def sniah_sample(cfg: TaskConfig, rng: np.random.Generator) -> TaskSample:
    keys, values, noise = sniah_vocab(cfg.vocab)
    length = cfg.total_length
    if length < 4:
        raise TaskConfigError("S-NIAH needs room for a needle pair, SEP and the query")
    if len(noise) == 0 and length > 4:
        raise TaskConfigError("vocabulary too small for distractors")
    ctx = length - 2
    inp, tgt, mask = _blank(length)
    inp[:ctx] = rng.integers(noise.start, noise.stop, size=ctx) if len(noise) else 0
    key = int(rng.integers(keys.start, keys.stop))
    val = int(rng.integers(values.start, values.stop))
    at = int(rng.integers(0, ctx - 1))
    inp[at], inp[at + 1] = key, val
    inp[ctx] = SEP
    inp[ctx + 1] = key
    tgt[ctx + 1] = val
    mask[ctx + 1] = True
    return TaskSample(inp, tgt, mask)


def palindrome_sample(cfg: TaskConfig, rng: np.random.Generator) -> TaskSample:
    length = cfg.total_length
    n = cfg.seq_len * cfg.factor if cfg.seq_len is not None else (length - 1) // 2
    if n < 1 or 2 * n + 1 > length:
        raise TaskConfigError(f"a palindrome of {n} tokens does not fit length {length}")
    inp, tgt, mask = _blank(length)
    x = rng.integers(N_SPECIAL, cfg.vocab, size=n)
    inp[:n] = x
    inp[n] = SEP
    echo = x[::-1]
    inp[n + 1 : 2 * n + 1] = echo
    # at each echoed token predict the following echoed token
    tgt[n + 1 : 2 * n] = echo[1:]
    mask[n + 1 : 2 * n] = True
    return TaskSample(inp, tgt, mask)


def stack_sample(cfg: TaskConfig, rng: np.random.Generator) -> TaskSample:
    ids, elems = stack_vocab(cfg.vocab, cfg.num_stacks)
    length = cfg.total_length
    if cfg.num_stacks < 1 or len(elems) < 1:
        raise TaskConfigError("stack task needs at least one stack and one element token")
    if length < 5:
        raise TaskConfigError("stack task needs room for a push and a pop")
    inp, tgt, mask = _blank(length)
    stacks: list[list[int]] = [[] for _ in range(cfg.num_stacks)]
    t = 0
    while True:
        remaining = length - t
        live = [s for s in range(cfg.num_stacks) if stacks[s]]
        can_push = remaining >= 3 + (2 if not live else 0)
        can_pop = remaining >= 2 and bool(live)
        if not (can_push or can_pop):
            break
        if can_pop and (not can_push or rng.random() < 0.5):
            s = live[int(rng.integers(len(live)))]
            inp[t], inp[t + 1] = POP, ids[s]
            tgt[t + 1] = stacks[s].pop()
            mask[t + 1] = True
            t += 2
        else:
            s = int(rng.integers(cfg.num_stacks))
            tok = int(rng.integers(elems.start, elems.stop))
            inp[t : t + 3] = (PUSH, ids[s], tok)
            stacks[s].append(tok)
            t += 3
    return TaskSample(inp, tgt, mask)


GENERATORS: dict[str, Callable[[TaskConfig, np.random.Generator], TaskSample]] = {
    "mqar": mqar_sample,
    "sniah": sniah_sample,
    "palindrome": palindrome_sample,
    "stack": stack_sample,
}


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    split_id = list(SPLITS).index(split) if split in SPLITS else int(hashlib.sha256(split.encode()).hexdigest()[:8], 16)
    return np.random.default_rng(np.random.SeedSequence([seed, split_id, index]))


def generate(cfg: TaskConfig, count: int, split: str = "train", seed: int | None = None) -> Dataset:
    """``count`` samples of ``cfg.task``; sample ``i`` depends only on (seed, split, i)."""
    if count < 1:
        raise TaskConfigError("count must be positive")
    seed = cfg.seed if seed is None else seed
    gen = GENERATORS[cfg.task]
    samples = [gen(cfg, sample_rng(seed, split, i)) for i in range(count)]
    return Dataset.from_samples(samples, cfg, split)


def gen_mqar(cfg: TaskConfig, seed: int | None = None, count: int = SPLITS["train"], split: str = "train") -> Dataset:
    return generate(replace(cfg, task="mqar"), count, split, seed)


def gen_sniah(cfg: TaskConfig, seed: int | None = None, count: int = SPLITS["train"], split: str = "train") -> Dataset:
    return generate(replace(cfg, task="sniah"), count, split, seed)


def gen_palindrome(cfg: TaskConfig, seed: int | None = None, count: int = SPLITS["train"], split: str = "train") -> Dataset:
    return generate(replace(cfg, task="palindrome"), count, split, seed)


def gen_stack(cfg: TaskConfig, seed: int | None = None, count: int = SPLITS["train"], split: str = "train") -> Dataset:
    return generate(replace(cfg, task="stack"), count, split, seed)


def gen_splits(cfg: TaskConfig, counts: dict | None = None) -> dict[str, Dataset]:
    counts = SPLITS if counts is None else counts
    return {name: generate(cfg, n, name) for name, n in counts.items() if n > 0}


def extrapolation_sets(cfg: TaskConfig, count: int, factors=EXTRAPOLATION_FACTORS) -> dict[int, Dataset]:
    """Test sets at ``length * f``; every other statistic is left as in ``cfg``."""
    return {f: generate(replace(cfg, factor=f), count, f"extrap{f}") for f in factors}


# -- brute-force reference simulators ----------------------------------------------
# These read only the input token stream, never the generator's internals.


def simulate_mqar(inp) -> dict[int, int]:
    seen = {}
    inp = [int(x) for x in inp]
    sep = inp.index(SEP)
    for i in range(0, sep - 1, 2):
        if inp[i] != PAD:
            seen[inp[i]] = inp[i + 1]
    return {j: seen[inp[j]] for j in range(sep + 1, len(inp)) if inp[j] != PAD}


def simulate_sniah(inp) -> dict[int, int]:
    inp = [int(x) for x in inp]
    sep = len(inp) - 1 - inp[::-1].index(SEP)
    key = inp[sep + 1]
    where = [i for i in range(sep - 1) if inp[i] == key]
    return {sep + 1: inp[where[-1] + 1]}


def simulate_palindrome(inp) -> dict[int, int]:
    inp = [int(x) for x in inp]
    sep = inp.index(SEP)
    prefix = inp[:sep]
    reversed_prefix = list(reversed(prefix))
    # position sep+1+j holds reversed_prefix[j] and predicts reversed_prefix[j+1]
    return {sep + 1 + j: reversed_prefix[j + 1] for j in range(len(prefix) - 1)}


def simulate_stack(inp) -> dict[int, int]:
    inp = [int(x) for x in inp]
    stacks: dict[int, list] = {}
    out = {}
    i = 0
    while i < len(inp):
        op = inp[i]
        if op == PUSH:
            stacks.setdefault(inp[i + 1], []).append(inp[i + 2])
            i += 3
        elif op == POP:
            out[i + 1] = stacks[inp[i + 1]].pop()
            i += 2
        else:
            i += 1
    return out


SIMULATORS = {
    "mqar": simulate_mqar,
    "sniah": simulate_sniah,
    "palindrome": simulate_palindrome,
    "stack": simulate_stack,
}


def oracle_mismatches(ds: Dataset, task: str | None = None) -> int:
    """Scored positions whose target disagrees with the task's simulator, plus
    positions the simulator scores but the mask does not."""
    task = task or ds.config.task
    sim = SIMULATORS[task]
    bad = 0
    for s in ds:
        expect = sim(s.input_ids)
        scored = {int(i): int(s.target_ids[i]) for i in np.flatnonzero(s.loss_mask)}
        bad += len(set(expect.items()) ^ set(scored.items()))
    return bad


# -- evaluation ----------------------------------------------------------------------


def evaluate(model: Callable, ds: Dataset, batch_size: int = 512) -> float:
    """Exact-match accuracy over scored positions.

    ``model`` maps ``(B, L)`` input ids to either logits ``(B, L, V)`` or
    predicted ids ``(B, L)``.
    """
    total = int(ds.loss_mask.sum())
    if total == 0:
        raise ValueError("dataset has no scored positions")
    hits = 0
    for lo in range(0, len(ds), batch_size):
        ids = ds.input_ids[lo : lo + batch_size]
        pred = np.asarray(model(ids))
        if pred.ndim == 3:
            pred = pred.argmax(axis=-1)
        m = ds.loss_mask[lo : lo + batch_size]
        hits += int(((pred == ds.target_ids[lo : lo + batch_size]) & m).sum())
    return hits / total


# -- files -----------------------------------------------------------------------------


RECONSTRUCTED = {
    "mqar": "filler placement (tail or gap) is a local choice",
    "sniah": "prompt format, distractor vocabulary and single-token answer are reconstructions",
    "palindrome": None,
    "stack": "token encoding PUSH id tok / POP id is a reconstruction",
}


def write_jsonl(ds: Dataset, path) -> str:
    """Write one sample per line; returns the sha256 of the file bytes."""
    h = hashlib.sha256()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in ds:
            line = s.to_json() + "\n"
            h.update(line.encode())
            f.write(line)
    return h.hexdigest()


def read_jsonl(path, config: TaskConfig | None = None, split: str = "train") -> Dataset:
    with open(path, encoding="utf-8") as f:
        return Dataset.from_samples((TaskSample.from_json(line) for line in f if line.strip()), config, split)


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_dataset(splits: dict[str, Dataset], out_dir, cfg: TaskConfig) -> dict:
    """Write ``<split>.jsonl`` files and ``manifest.json`` into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name, ds in splits.items():
        fname = f"{name}.jsonl"
        files[name] = {"file": fname, "count": len(ds), "sha256": write_jsonl(ds, os.path.join(out_dir, fname))}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "splits": files,
        "reconstruction": RECONSTRUCTED[cfg.task],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def read_dataset(out_dir, split: str, verify: bool = True) -> Dataset:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    entry = manifest["splits"][split]
    path = os.path.join(out_dir, entry["file"])
    if verify and file_sha256(path) != entry["sha256"]:
        raise ValueError(f"{path} does not match its manifest hash")
    cfg = TaskConfig(**manifest["config"])
    return read_jsonl(path, cfg, split)
