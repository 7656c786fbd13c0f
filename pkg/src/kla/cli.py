"""Command-line entry point: ``kla {verify,equiv,gen,train,eval,bench}``.

Settings come from defaults, then an optional ``--config`` JSON file, then
explicit flags. Exit codes: 0 success, 1 a check or metric failed, 2 bad
usage or configuration. Reports are JSON on stdout (and in ``--out`` when
given).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import bench, tasks, theory
from .chunk import run_chunked, run_wy
from .recurrence import ConfigurationError, UpdateRule, random_tokens, run_sequence

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "rule": None,
    "dk": None,
    "dv": None,
    "vexpand": None,
    "chunk": None,
    "eps": 1e-6,
    "seed": 42,
    "len": None,
    "samples": None,
    "out": None,
    "precision": "float64",
    # verify
    "mutate": None,
    # gen / train / eval
    "task": "mqar",
    "vocab": None,
    "pairs": None,
    "factor": 1,
    "layout": "tail",
    "data": None,
    "split": "test",
    "checkpoint": None,
    "dmodel": 64,
    "layers": 2,
    "steps": 5000,
    "lr": 1e-3,
    "batch": 32,
    "eval_every": 200,
    "patience": 10,
    "eval_samples": None,
    "target": None,
    "threshold": None,
    # bench
    "mode": "all",
    "reps": 5,
    "gen_tokens": 256,
    "check": False,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("shared")
    g.add_argument("--rule", help="update rule, or a comma list for sweeps")
    g.add_argument("--dk", type=int)
    g.add_argument("--dv", type=int)
    g.add_argument("--vexpand", type=float)
    g.add_argument("--chunk", type=_int_list, help="chunk length(s)")
    g.add_argument("--eps", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--len", type=_int_list, help="sequence length(s)")
    g.add_argument("--samples", type=int)
    g.add_argument("--out")
    g.add_argument("--precision", choices=sorted(bench.PRECISIONS))
    g.add_argument("--config", help="JSON file of settings; flags override it")

    p = argparse.ArgumentParser(prog="kla", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", parents=[common], help="run the projection / contraction theory suite")
    v.add_argument("--mutate", choices=["gdn"], help="swap in the GDN coefficient (the suite must fail)")

    sub.add_parser("equiv", parents=[common], help="tokenwise vs chunkwise vs WY agreement sweep")

    gen = sub.add_parser("gen", parents=[common], help="write a synthetic task dataset")
    tr = sub.add_parser("train", parents=[common], help="train the toy model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    for sp in (gen, tr, ev):
        sp.add_argument("--task", choices=tasks.TASKS)
        sp.add_argument("--vocab", type=int)
        sp.add_argument("--pairs", type=int)
        sp.add_argument("--factor", type=int)
        sp.add_argument("--layout", choices=["tail", "gap"])
        sp.add_argument("--data", help="dataset directory written by gen")
    for sp in (tr, ev):
        sp.add_argument("--dmodel", type=int)
        sp.add_argument("--layers", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--eval-every", dest="eval_every", type=int)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--eval-samples", dest="eval_samples", type=int)
    tr.add_argument("--target", type=float, help="stop once eval accuracy reaches this")
    ev.add_argument("--checkpoint")
    ev.add_argument("--split")
    ev.add_argument("--threshold", type=float, help="exit 1 if accuracy is below")

    b = sub.add_parser("bench", parents=[common], help="prefill / decode timing")
    b.add_argument("--mode", choices=["prefill", "decode", "all"])
    b.add_argument("--reps", type=int)
    b.add_argument("--gen-tokens", dest="gen_tokens", type=int)
    b.add_argument("--check", action="store_true", default=None, help="exit 1 if a scaling property fails")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                loaded = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in DEFAULTS and val is not None:
            cfg[key] = val
    for key in ("len", "chunk"):
        if cfg[key] is not None and not isinstance(cfg[key], list):
            cfg[key] = [int(cfg[key])]
    if cfg["samples"] is not None and cfg["samples"] < 1:
        raise ConfigError("--samples must be positive")
    if cfg["eps"] < 0:
        raise ConfigError("--eps must be nonnegative")
    if cfg["precision"] not in bench.PRECISIONS:
        raise ConfigError(f"unknown precision {cfg['precision']!r}")
    return cfg


def dims(cfg: dict, dk_default: int) -> tuple[int, int]:
    """``(d_k, d_v)``; ``--dv`` and ``--vexpand`` must agree when both are set."""
    dk = cfg["dk"] if cfg["dk"] is not None else dk_default
    if dk < 1:
        raise ConfigError("--dk must be positive")
    expand = cfg["vexpand"]
    if expand is not None and expand <= 0:
        raise ConfigError("--vexpand must be positive")
    dv = cfg["dv"]
    if dv is not None:
        if dv < 1:
            raise ConfigError("--dv must be positive")
        if expand is not None and dv != round(dk * expand):
            raise ConfigError(f"--dv {dv} disagrees with --dk {dk} x --vexpand {expand}")
        return dk, dv
    return dk, max(1, round(dk * (expand or 1.0)))


def rules_of(cfg: dict, default: list[str]) -> list[UpdateRule]:
    names = default if cfg["rule"] is None else str(cfg["rule"]).split(",")
    out = []
    for name in names:
        parts = name.strip().split("/")
        kw = {}
        for extra in parts[1:]:
            if extra in ("single", "dual"):
                kw["gating"] = extra
            elif extra in ("inv", "inv_sqrt", "inv_log"):
                kw["seq_factor"] = extra
            else:
                kw["normalization"] = extra
        try:
            out.append(UpdateRule(parts[0], **kw))
        except (ConfigurationError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return out


def emit(report: dict, cfg: dict, default_name: str) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    print(text)
    out = cfg["out"]
    if out:
        path = os.path.join(out, default_name) if os.path.isdir(out) else out
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")


# -- subcommands ------------------------------------------------------------------


def cmd_verify(cfg: dict) -> int:
    if cfg["precision"] != "float64":
        raise ConfigError("the theory suite runs in float64 only")
    samples = cfg["samples"] or 1000
    t0 = time.perf_counter()
    reports = theory.run_all(samples, cfg["seed"], mutate=cfg["mutate"])
    ok = all(r.passed for r in reports)
    emit(
        {
            "command": "verify",
            "samples": samples,
            "seed": cfg["seed"],
            "mutate": cfg["mutate"],
            "passed": ok,
            "seconds": time.perf_counter() - t0,
            "reports": [r.to_dict() for r in reports],
        },
        cfg,
        "verify.json",
    )
    return EXIT_OK if ok else EXIT_FAIL


EQUIV_CHUNKS = [1, 2, 4, 16, 64]
EQUIV_LENGTHS = [5, 64, 257, 512]
EQUIV_TOL = 1e-9


def equivalence_sweep(rules, chunks, lengths, d_k, d_v, eps, seed, precision="float64", tol=EQUIV_TOL) -> dict:
    """Max-abs disagreement of outputs and final states across the three paths."""
    dt = bench.PRECISIONS[precision]
    rows = []
    for rule in rules:
        for length in lengths:
            rng = np.random.default_rng([seed, length])
            seq = random_tokens(rng, length, d_k, d_v, key_scale=(0.2, 1.4), dtype=dt)
            s0 = np.zeros((d_k, d_v), dtype=dt)
            ref = run_sequence(rule, s0, seq, eps)
            for c in chunks:
                ch = run_chunked(rule, s0, seq, c, eps)
                wy = run_wy(rule, s0, seq, c, eps)
                dev = max(
                    float(np.max(np.abs(ch.outputs - ref.outputs))),
                    float(np.max(np.abs(ch.final_state - ref.final_state))),
                    float(np.max(np.abs(wy.outputs - ref.outputs))),
                    float(np.max(np.abs(wy.final_state - ref.final_state))),
                )
                rows.append({"rule": rule.name, "length": length, "chunk": c, "max_abs": dev})
    worst = max(r["max_abs"] for r in rows)
    return {"rows": rows, "max_deviation": worst, "tolerance": tol, "passed": worst <= tol}


def cmd_equiv(cfg: dict) -> int:
    rules = rules_of(cfg, ["gdn", "kla"])
    for r in rules:
        if not r.is_delta:
            raise ConfigError(f"{r.name} has no chunkwise form")
    d_k, d_v = dims(cfg, 16)
    chunks = cfg["chunk"] or EQUIV_CHUNKS
    lengths = cfg["len"] or EQUIV_LENGTHS
    if min(chunks) < 1 or min(lengths) < 1:
        raise ConfigError("chunk sizes and lengths must be positive")
    tol = EQUIV_TOL if cfg["precision"] == "float64" else 1e-3
    t0 = time.perf_counter()
    rep = equivalence_sweep(rules, chunks, lengths, d_k, d_v, cfg["eps"], cfg["seed"], cfg["precision"], tol)
    rep.update(command="equiv", d_k=d_k, d_v=d_v, precision=cfg["precision"], seconds=time.perf_counter() - t0)
    emit(rep, cfg, "equiv.json")
    return EXIT_OK if rep["passed"] else EXIT_FAIL


def task_config(cfg: dict) -> tasks.TaskConfig:
    kw = {"task": cfg["task"], "seed": cfg["seed"], "factor": cfg["factor"], "mqar_layout": cfg["layout"]}
    if cfg["len"]:
        kw["length"] = cfg["len"][0]
    if cfg["vocab"] is not None:
        kw["vocab"] = cfg["vocab"]
    if cfg["pairs"] is not None:
        kw["num_pairs"] = cfg["pairs"]
    try:
        tc = tasks.TaskConfig(**kw)
        tasks.generate(tc, 1, "probe")  # surfaces infeasible settings as config errors
    except tasks.TaskConfigError as exc:
        raise ConfigError(str(exc)) from None
    return tc


def split_counts(cfg: dict) -> dict:
    n = cfg["samples"]
    if n is None:
        return dict(tasks.SPLITS)
    return {"train": n, "valid": max(1, n // 10), "test": max(1, n // 10)}


def cmd_gen(cfg: dict) -> int:
    if not cfg["out"]:
        raise ConfigError("gen needs --out DIR")
    tc = task_config(cfg)
    splits = tasks.gen_splits(tc, split_counts(cfg))
    manifest = tasks.write_dataset(splits, cfg["out"], tc)
    print(json.dumps({"command": "gen", "out": cfg["out"], **manifest}, indent=2, sort_keys=True))
    return EXIT_OK


def _datasets(cfg: dict):
    if cfg["data"]:
        try:
            return {s: tasks.read_dataset(cfg["data"], s) for s in ("train", "valid", "test")}
        except (OSError, KeyError) as exc:
            raise ConfigError(f"cannot read dataset {cfg['data']}: {exc}") from None
    return tasks.gen_splits(task_config(cfg), split_counts(cfg))


def model_config(cfg: dict, vocab: int):
    from .autodiff.model import ModelConfig

    rule = rules_of(cfg, ["kla"])
    if len(rule) != 1:
        raise ConfigError("training takes a single rule")
    r = rule[0]
    d_k, d_v = dims(cfg, 32)
    try:
        return ModelConfig(
            vocab=vocab,
            d_model=cfg["dmodel"],
            d_k=d_k,
            d_v_override=d_v,
            n_layers=cfg["layers"],
            rule=r.kind.value,
            normalization=r.normalization,
            gating=r.gating,
            seq_factor=r.seq_factor,
            eps=cfg["eps"],
        )
    except ConfigurationError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    from .autodiff import train as tr

    if not cfg["out"]:
        raise ConfigError("train needs --out DIR")
    if cfg["steps"] < 0 or cfg["batch"] < 1 or cfg["lr"] < 0:
        raise ConfigError("steps must be >= 0, batch >= 1 and lr >= 0")
    data = _datasets(cfg)
    train_ds = data["train"]
    vocab = cfg["vocab"] or (train_ds.config.vocab if train_ds.config else int(train_ds.input_ids.max()) + 1)
    mcfg = model_config(cfg, vocab)
    opt = tr.OptimConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch"],
        steps=cfg["steps"],
        eval_every=cfg["eval_every"],
        patience=cfg["patience"],
        target_acc=cfg["target"],
        eval_samples=cfg["eval_samples"],
    )
    os.makedirs(cfg["out"], exist_ok=True)
    log = lambda msg: print(msg, file=sys.stderr, flush=True)
    try:
        res = tr.train(mcfg, train_ds, data.get("valid"), opt, cfg["seed"], log=log, dump_path=os.path.join(cfg["out"], "diverged.json"))
    except tr.TrainingDiverged as exc:
        print(json.dumps({"command": "train", "error": str(exc), "dump": exc.dump}, indent=2))
        return EXIT_FAIL
    ckpt = os.path.join(cfg["out"], "checkpoint.json")
    trace = os.path.join(cfg["out"], "trace.csv")
    tr.save_checkpoint(ckpt, res.params, mcfg, {"seed": cfg["seed"], "best_step": res.best_step})
    tr.write_trace(res.trace, trace)
    manifest = {
        "command": "train",
        "model_config": mcfg.to_dict(),
        "optim_config": opt.to_dict(),
        "seed": cfg["seed"],
        "data": cfg["data"],
        "steps_run": res.steps_run,
        "best_step": res.best_step,
        "best_eval_acc": res.best_acc,
        "stop_reason": res.stop_reason,
        "seconds": res.seconds,
        "files": {"checkpoint": tasks.file_sha256(ckpt), "trace": tasks.file_sha256(trace)},
    }
    with open(os.path.join(cfg["out"], "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .autodiff import train as tr
    from .autodiff.model import predict

    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    try:
        params, mcfg, _ = tr.load_checkpoint(cfg["checkpoint"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from None
    if cfg["data"]:
        try:
            ds = tasks.read_dataset(cfg["data"], cfg["split"])
        except (OSError, KeyError) as exc:
            raise ConfigError(f"cannot read split {cfg['split']!r}: {exc}") from None
    else:
        tc = task_config(cfg)
        ds = tasks.generate(tc, cfg["samples"] or tasks.SPLITS["test"], cfg["split"])
    if int(ds.input_ids.max()) >= mcfg.vocab:
        raise ConfigError("dataset tokens exceed the model vocabulary")
    acc = tasks.evaluate(lambda ids: predict(mcfg, params, ids), ds)
    ok = cfg["threshold"] is None or acc >= cfg["threshold"]
    emit({"command": "eval", "accuracy": acc, "samples": len(ds), "threshold": cfg["threshold"], "passed": ok}, cfg, "eval.json")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(cfg: dict) -> int:
    rules = rules_of(cfg, ["gdn", "kla"])
    for r in rules:
        if not r.is_delta:
            raise ConfigError(f"{r.name} has no chunkwise form")
    d_k, d_v = dims(cfg, 64)
    chunk = (cfg["chunk"] or [64])[0]
    prec, reps = cfg["precision"], cfg["reps"]
    if reps < bench.MIN_REPS:
        raise ConfigError(f"--reps must be at least {bench.MIN_REPS}")
    results, summary = [], {}
    if cfg["mode"] in ("prefill", "all"):
        lengths = cfg["len"] or [1024, 2048, 4096, 8192]
        per_rule = bench.prefill_sweep(rules, lengths, d_k, d_v, chunk, reps, precision=prec, seed=cfg["seed"])
        for name, rs in per_rule.items():
            results += rs
            summary[f"{name}_scaling"] = bench.scaling_ratios(rs)
        if "gdn" in per_rule and "kla" in per_rule:
            summary["kla_over_gdn"] = bench.median_ratio(per_rule["kla"], per_rule["gdn"])
    if cfg["mode"] in ("decode", "all"):
        contexts = cfg["len"] if cfg["mode"] == "decode" and cfg["len"] else [1024, 32768]
        for r in rules:
            rs = bench.bench_decode(r, contexts, cfg["gen_tokens"], reps, d_k, d_v, chunk, precision=prec, seed=cfg["seed"])
            results += rs
            summary[f"{r.name}_tpot_ratio"] = rs[-1].tpot_ms / rs[0].tpot_ms
    checks = {}
    for key, vals in summary.items():
        if key.endswith("_scaling"):
            checks[key] = all(x <= 2.5 for x in vals)
        elif key == "kla_over_gdn":
            checks[key] = all(0.8 <= x <= 1.25 for x in vals)
        elif key.endswith("_tpot_ratio"):
            checks[key] = vals <= 1.2
    if cfg["out"]:
        path = os.path.join(cfg["out"], "bench.csv") if os.path.isdir(cfg["out"]) else cfg["out"]
        bench.write_csv(results, path)
    print(json.dumps({"command": "bench", "summary": summary, "checks": checks, "rows": [r.row() for r in results]}, indent=2))
    return EXIT_FAIL if cfg["check"] and not all(checks.values()) else EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "equiv": cmd_equiv,
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"kla {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
