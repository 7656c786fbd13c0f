import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kla.tasks import (
    PAD,
    POP,
    PUSH,
    SEP,
    SPLITS,
    TaskConfig,
    TaskConfigError,
    TaskSample,
    Dataset,
    evaluate,
    extrapolation_sets,
    file_sha256,
    gen_mqar,
    gen_palindrome,
    gen_sniah,
    gen_stack,
    generate,
    mqar_vocab,
    oracle_mismatches,
    read_dataset,
    read_jsonl,
    simulate_mqar,
    simulate_palindrome,
    simulate_stack,
    sniah_vocab,
    write_dataset,
    write_jsonl,
)


def test_mqar_one_pair_one_query():
    ds = gen_mqar(TaskConfig("mqar", length=8, vocab=16, num_pairs=1), count=5)
    for s in ds:
        scored = np.flatnonzero(s.loss_mask)
        assert scored.tolist() == [3]
        assert s.input_ids[2] == SEP and s.input_ids[3] == s.input_ids[0]
        assert s.target_ids[3] == s.input_ids[1]


def test_mqar_diagram_example():
    # A->1, C->3, B->0, M->8, G->5, E->4, then queries B and G
    a, c, b, m, g, e = 2, 3, 4, 5, 6, 7
    inp = [a, 11, c, 13, b, 10, m, 18, g, 15, e, 14, SEP, b, g]
    assert simulate_mqar(inp) == {13: 10, 14: 15}


def test_mqar_defaults():
    cfg = TaskConfig("mqar")
    assert (cfg.length, cfg.vocab, cfg.num_pairs) == (256, 8192, 32)
    ds = gen_mqar(cfg, count=50)
    keys, values = mqar_vocab(cfg.vocab)
    for s in ds:
        k = s.input_ids[0:64:2]
        assert len(set(k.tolist())) == 32 and all(x in keys for x in k)
        assert all(x in values for x in s.input_ids[1:64:2])
        assert s.loss_mask.sum() == 32
    assert oracle_mismatches(ds) == 0


def test_mqar_gap_layout_puts_queries_last():
    ds = gen_mqar(TaskConfig("mqar", length=32, vocab=32, num_pairs=4, mqar_layout="gap"), count=10)
    for s in ds:
        assert s.loss_mask[-4:].all() and s.input_ids[-5] == SEP
        assert (s.input_ids[8:-5] == PAD).all()
    assert oracle_mismatches(ds) == 0


def test_sniah_needle_only_and_at_start():
    s = gen_sniah(TaskConfig("sniah", length=4, vocab=32), count=1)[0]
    assert s.input_ids[2] == SEP and s.input_ids[3] == s.input_ids[0]
    assert s.target_ids[3] == s.input_ids[1]
    ds = gen_sniah(TaskConfig("sniah", length=1024, vocab=512), count=300)
    keys, _, noise = sniah_vocab(512)
    at_zero = [x for x in ds if x.input_ids[0] in keys]
    assert at_zero, "expected some needles at position 0 in 300 draws"
    for x in at_zero:
        assert x.target_ids[-1] == x.input_ids[1]
    assert all(np.isin(x.input_ids[:-2], list(noise)).sum() == 1022 - 2 for x in ds)
    assert oracle_mismatches(ds) == 0


def test_palindrome_og_example():
    o, g = 20, 21
    inp = [o, g, SEP, g, o]
    assert simulate_palindrome(inp) == {3: o}
    single = gen_palindrome(TaskConfig("palindrome", length=3, vocab=16), count=1)[0]
    assert not single.loss_mask.any()


def test_palindrome_reversal_is_involution():
    ds = gen_palindrome(TaskConfig("palindrome", length=40, vocab=64, seq_len=16), count=20)
    for s in ds:
        prefix = s.input_ids[:16]
        echo = s.input_ids[17:33]
        assert np.array_equal(echo[::-1], prefix)
        scored = s.target_ids[s.loss_mask]
        assert np.array_equal(np.concatenate([[echo[0]], scored])[::-1], prefix)
    assert oracle_mismatches(ds) == 0


def test_stack_lifo():
    a, b, sid = 30, 31, 4
    assert simulate_stack([PUSH, sid, a, POP, sid]) == {4: a}
    assert simulate_stack([PUSH, sid, a, PUSH, sid, b, POP, sid, POP, sid]) == {7: b, 9: a}
    ds = gen_stack(TaskConfig("stack", length=256 * 3, vocab=64, num_stacks=4), count=20)
    assert oracle_mismatches(ds) == 0
    assert all(s.loss_mask.any() for s in ds)


@pytest.mark.parametrize("task", ["mqar", "sniah", "palindrome", "stack"])
def test_oracles_agree(task):
    cfg = TaskConfig(task, length=128, vocab=256, num_pairs=16)
    assert oracle_mismatches(generate(cfg, 200, "valid")) == 0


def test_evaluate():
    ds = gen_mqar(TaskConfig("mqar", length=64, vocab=64, num_pairs=8), count=2000)
    lookup = {s.input_ids.tobytes(): s.target_ids for s in ds}
    oracle = lambda ids: np.stack([lookup[r.tobytes()] for r in ids])
    assert evaluate(oracle, ds) == 1.0
    rng = np.random.default_rng(0)
    vocab = 64
    acc = evaluate(lambda ids: rng.integers(0, vocab, ids.shape), ds)
    n = int(ds.loss_mask.sum())
    p = 1.0 / vocab
    assert abs(acc - p) <= 3.0 * math.sqrt(p * (1 - p) / n)
    logits = lambda ids: np.eye(vocab)[oracle(ids)]
    assert evaluate(logits, ds) == 1.0
    empty = Dataset(ds.input_ids[:2], ds.target_ids[:2], np.zeros_like(ds.loss_mask[:2]))
    with pytest.raises(ValueError):
        evaluate(oracle, empty)


def test_files_are_byte_identical(tmp_path):
    cfg = TaskConfig("mqar", length=32, vocab=32, num_pairs=4)
    h1 = write_jsonl(gen_mqar(cfg, count=30), tmp_path / "a.jsonl")
    h2 = write_jsonl(gen_mqar(cfg, count=30), tmp_path / "b.jsonl")
    assert h1 == h2 == file_sha256(tmp_path / "a.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_jsonl(tmp_path / "a.jsonl")
    assert np.array_equal(back.input_ids, gen_mqar(cfg, count=30).input_ids)
    # sample i does not depend on how many samples are drawn
    assert np.array_equal(gen_mqar(cfg, count=5).input_ids, back.input_ids[:5])
    assert not np.array_equal(gen_mqar(cfg, seed=1, count=5).input_ids, back.input_ids[:5])


def test_dataset_manifest(tmp_path):
    cfg = TaskConfig("stack", length=60, vocab=32)
    splits = {"train": generate(cfg, 10, "train"), "valid": generate(cfg, 4, "valid")}
    man = write_dataset(splits, tmp_path, cfg)
    assert man["splits"]["train"]["count"] == 10 and man["reconstruction"]
    assert np.array_equal(read_dataset(tmp_path, "valid").input_ids, splits["valid"].input_ids)
    with open(tmp_path / "valid.jsonl", "a") as f:
        f.write(TaskSample(np.zeros(60), np.zeros(60), np.zeros(60, bool)).to_json() + "\n")
    with pytest.raises(ValueError):
        read_dataset(tmp_path, "valid")
    assert SPLITS == {"train": 20000, "valid": 2000, "test": 2000}


def test_extrapolation_keeps_statistics():
    cfg = TaskConfig("mqar", length=64, vocab=64, num_pairs=8)
    sets = extrapolation_sets(cfg, 3)
    assert sorted(sets) == [1, 2, 4, 8]
    for f, ds in sets.items():
        assert ds.input_ids.shape == (3, 64 * f)
        assert (ds.loss_mask.sum(axis=1) == 8).all()
        assert oracle_mismatches(ds) == 0
    pal = extrapolation_sets(TaskConfig("palindrome", length=64, vocab=64, seq_len=20), 2, (1, 2))
    assert pal[2].loss_mask.sum(axis=1).tolist() == [39, 39]


@pytest.mark.parametrize(
    "kw",
    [
        dict(task="mqar", length=8, vocab=64, num_pairs=4),
        dict(task="mqar", length=64, vocab=10, num_pairs=8),
        dict(task="mqar", length=64, vocab=64, num_pairs=4, num_queries=5),
        dict(task="sniah", length=3, vocab=64),
        dict(task="palindrome", length=2, vocab=64),
        dict(task="stack", length=4, vocab=64),
    ],
)
def test_infeasible_configs(kw):
    with pytest.raises(TaskConfigError):
        generate(TaskConfig(**kw), 1)


def test_bad_config_values():
    for kw in (dict(task="nope"), dict(factor=0), dict(mqar_layout="middle")):
        with pytest.raises(TaskConfigError):
            TaskConfig(**kw)
    with pytest.raises(TaskConfigError):
        generate(TaskConfig(), 0)


@given(st.sampled_from(["mqar", "sniah", "palindrome", "stack"]), st.integers(16, 96), st.integers(0, 10**6))
def test_generators_match_simulators(task, length, seed):
    cfg = TaskConfig(task, length=length, vocab=48, num_pairs=min(6, (length - 2) // 3), seed=seed)
    ds = generate(cfg, 3)
    assert oracle_mismatches(ds) == 0
    assert ds.input_ids.shape == (3, length)
