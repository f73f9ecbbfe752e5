"""``mtgr`` command line: every subcommand writes files and prints one JSON line."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from . import config as C
from .data import DataError, SchemaError, dump_jsonl, infer_schema, load_jsonl, token_layout
from .datagen import default_schema, generate, shuffle_cross_features, split, write_dataset
from .diagnostics import EXAMPLE_LABELS, dedup_stats, example_mask, grad_check_encoder
from .encoder import PRESETS, ConfigError, build_dynamic_mask
from .metrics import flops_estimate
from .trainer import TrainingAborted, evaluate, load_checkpoint, train

logger = logging.getLogger("mtgr")

GRAD_TOLERANCE = 1e-4

DEFAULTS = {
    "gen-data": {"out_dir": "data"},
    "grad-check": {"n_layer": 2, "d_model": 8, "n_heads": 2},
}


class UsageError(ValueError):
    pass


def _require(values: Dict[str, Any], key: str) -> Any:
    v = C.run_value(values, key)
    if v is None:
        raise UsageError(f"missing required key {key!r} (set it in the config or as {key}=...)")
    return v


def _load_samples(values: Dict[str, Any], key: str):
    return load_jsonl(_require(values, key), C.run_value(values, "max_static"), C.run_value(values, "max_realtime"))


def cmd_gen_data(values: Dict[str, Any]) -> dict:
    cfg = C.gen_config(values)
    out = Path(C.run_value(values, "out_dir"))
    t0 = time.perf_counter()
    data = generate(cfg)
    paths = write_dataset(data, out)
    frac = C.run_value(values, "test_fraction")
    tr, te = split(data.samples, frac, cfg.seed)
    dump_jsonl(tr, out / "train.jsonl")
    dump_jsonl(te, out / "test.jsonl")
    return {
        "samples": len(data.samples),
        "train": len(tr),
        "test": len(te),
        "bayes_auc": data.manifest["bayes_auc"],
        "data": str(paths["data"]),
        "manifest": str(paths["manifest"]),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def cmd_train(values: Dict[str, Any]) -> dict:
    cfg = C.train_config(values)
    samples = _load_samples(values, "data")
    eval_samples = _load_samples(values, "eval_data") if C.run_value(values, "eval_data") else None
    mode = C.run_value(values, "cross_mode")
    if mode == "shuffle":
        samples = shuffle_cross_features(samples, cfg.seed)
        if eval_samples:
            eval_samples = shuffle_cross_features(eval_samples, cfg.seed + 1)
    elif mode != "keep":
        raise UsageError(f"cross_mode must be 'keep' or 'shuffle', got {mode!r}")
    schema = infer_schema(samples + list(eval_samples or []), cfg.model.d_model)
    out = Path(C.run_value(values, "out_dir"))
    t0 = time.perf_counter()
    res = train(samples, schema, cfg, out_dir=out, eval_samples=eval_samples)
    last = res.log[-1] if res.log else {}
    return {
        "steps": len(res.log),
        "first_loss": res.log[0]["loss"] if res.log else None,
        "final_loss": last.get("loss"),
        "auc": last.get("auc"),
        "gauc": last.get("gauc"),
        "checkpoint": str(out / "checkpoint"),
        "metrics": str(out / "metrics.jsonl"),
        "seconds": round(time.perf_counter() - t0, 3),
    }


def cmd_eval(values: Dict[str, Any]) -> dict:
    ckpt_dir = _require(values, "checkpoint")
    ckpt = load_checkpoint(ckpt_dir)
    key = "eval_data" if C.run_value(values, "eval_data") else "data"
    samples = _load_samples(values, key)
    if C.run_value(values, "cross_mode") == "shuffle":
        samples = shuffle_cross_features(samples, values.get("seed", 0) + 1)
    report = evaluate(samples, ckpt.schema, ckpt.model, ckpt.params, ckpt.store)
    out = Path(C.run_value(values, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return {**report, "report": str(path)}


def cmd_grad_check(values: Dict[str, Any]) -> dict:
    cfg = C.model_config({**DEFAULTS["grad-check"], **values})
    per = grad_check_encoder(cfg, length=values.get("grad_check_len", 12), seed=values.get("seed", 0))
    worst = max(per.values())
    out = Path(C.run_value(values, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grad_check.json"
    path.write_text(json.dumps({"max_error": worst, "modules": per}, indent=2))
    ok = worst < GRAD_TOLERANCE
    return {"max_error": worst, "ok": ok, "modules": len(per), "report": str(path), "_exit": 0 if ok else 1}


def cmd_inspect_mask(values: Dict[str, Any]) -> dict:
    mode = values.get("mask_mode", "dynamic")
    fixture = C.run_value(values, "fixture")
    if fixture == "example":
        mask, labels = example_mask(mode), list(EXAMPLE_LABELS)
    elif fixture is not None:
        raise UsageError(f"unknown fixture {fixture!r}; the built-in one is 'example'")
    else:
        samples = _load_samples(values, "data")
        idx = C.run_value(values, "sample_index")
        if not 0 <= idx < len(samples):
            raise UsageError(f"sample_index {idx} out of range for {len(samples)} samples")
        schema = infer_schema(samples, values.get("d_model", 32))
        tags, ts, _ = token_layout(samples[idx], schema)
        mask = build_dynamic_mask(tags, ts, mode)
        s = samples[idx]
        labels = (list(schema.profile) + [f"s{i}" for i in range(len(s.static_seq))]
                  + [f"r{i}" for i in range(len(s.realtime_seq))] + [f"c{i}" for i in range(len(s.candidates))])
    grid = mask.render(labels)
    out = Path(C.run_value(values, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "mask.txt"
    path.write_text(grid + "\n")
    return {"tokens": int(mask.values.shape[0]), "visible": int(mask.values.sum()), "mode": mode,
            "grid": grid.splitlines(), "path": str(path)}


def cmd_bench_flops(values: Dict[str, Any]) -> dict:
    lengths = (3, values.get("bench_static", 1000), values.get("bench_realtime", 100), values.get("bench_candidates", 10))
    rows = []
    schema_cache = {}
    for name, (cfg, lr) in PRESETS.items():
        schema = schema_cache.setdefault(cfg.d_model, default_schema(cfg.d_model))
        rep = flops_estimate(cfg, lengths, schema)
        rows.append({
            "model": name,
            "setting": f"n_layer={cfg.n_layer}, d_model={cfg.d_model}, n_heads={cfg.n_heads}",
            "learning_rate": lr,
            "gflops_per_sample": round(rep.total / 1e9, 4),
            "gflops_per_candidate": round(rep.per_candidate / 1e9, 4),
        })
    header = f"{'Model':<8} {'Setting':<36} {'Learning rate':>13} {'GFLOPs/sample':>14} {'GFLOPs/candidate':>17}"
    lines = [header] + [
        f"{r['model']:<8} {r['setting']:<36} {r['learning_rate']:>13.0e} {r['gflops_per_sample']:>14.2f} "
        f"{r['gflops_per_candidate']:>17.2f}" for r in rows
    ]
    out = Path(C.run_value(values, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.txt").write_text("\n".join(lines) + "\n")
    (out / "flops.json").write_text(json.dumps({"lengths": lengths, "rows": rows}, indent=2))
    print("\n".join(lines), file=sys.stderr)
    return {"lengths": list(lengths), "rows": rows, "table": str(out / "flops.txt"),
            "large_over_small": rows[-1]["gflops_per_sample"] / rows[0]["gflops_per_sample"]}


def cmd_dedup_stats(values: Dict[str, Any]) -> dict:
    samples = _load_samples(values, "data")
    workers = C.run_value(values, "dedup_workers")
    d_model = values.get("d_model", 32)
    schema = infer_schema(samples, d_model)
    rep = dedup_stats(samples, schema, workers, values.get("num_shards") or workers,
                      values.get("token_budget", 4096), values.get("max_steps", 0))
    out = Path(C.run_value(values, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    body = rep.to_json()
    (out / "dedup_stats.json").write_text(json.dumps(body, indent=2))
    return {**body["total"], "steps": rep.steps, "report": str(out / "dedup_stats.json")}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic dataset with a planted click model"),
    "train": (cmd_train, "train and write metrics.jsonl plus a checkpoint"),
    "eval": (cmd_eval, "score a dataset with a checkpoint and report AUC/GAUC"),
    "grad-check": (cmd_grad_check, "finite-difference check of the encoder gradients"),
    "inspect-mask": (cmd_inspect_mask, "render the attention mask of one sample as a text grid"),
    "bench-flops": (cmd_bench_flops, "closed-form FLOPs for the preset model sizes"),
    "dedup-stats": (cmd_dedup_stats, "ids moved by each embedding dedup stage over one epoch"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtgr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("-c", "--config", help="flat TOML config file")
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="config overrides, TOML-typed")
    return p


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=str) + "\n")
    sys.stdout.flush()


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("LOG_LEVEL", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        values = C.load_config(args.config, args.overrides)
        merged = {**DEFAULTS.get(args.command, {}), **values}
        result = fn(merged)
    except C.ConfigParseError as exc:
        _emit({"command": args.command, "ok": False, "error": "config", "message": str(exc),
               "line": exc.line, "column": exc.column})
        print(f"mtgr: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, DataError, SchemaError, TrainingAborted, FileNotFoundError,
            ValueError, TypeError) as exc:
        _emit({"command": args.command, "ok": False, "error": type(exc).__name__, "message": str(exc)})
        print(f"mtgr: {exc}", file=sys.stderr)
        return 1
    code = result.pop("_exit", 0)
    _emit({"command": args.command, "ok": code == 0, **result})
    return code


if __name__ == "__main__":
    raise SystemExit(main())
