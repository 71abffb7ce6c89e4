"""Command-line entry point: data prep, single runs, suites, artifact export.

Hyperparameters live in json config files; flags cover only paths, seeds and
verbosity. Logs go to stderr, machine-readable artifacts to files. The
default output directory comes from --out-dir, then the config, then the
BRIDGEREC_OUT_DIR environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import checkpoint
from .bridge import attention_table, save_bridge_nets
from .data import load_domain, make_split
from .models import TrainConfig, load_model, save_model, user_representation
from .pipeline import (AmazonTask, ExperimentPlan, SyntheticSpec, SyntheticTask,
                       run_cold, run_suite, run_warm, sweep_plans,
                       write_suite_csv, write_suite_json)

logger = logging.getLogger(__name__)

OUT_DIR_ENV = "BRIDGEREC_OUT_DIR"

BRIDGE_NET_METHODS = ("ptupcdr", "ptupcdr_mapping_ablation")

_TRAIN_KEYS = {"lr", "epochs", "batch_size", "activation", "patience"}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SyntheticSpec)}
_AMAZON_KEYS = {"src_path", "tgt_path", "format", "name"}
_RUN_KEYS = {"task", "method", "base_model", "beta", "seed", "k",
             "pretrain", "bridge", "finetune",
             "max_seq_len", "include_test_users_in_source", "finetune_items",
             "allow_off_grid_lr", "clip_low", "clip_high",
             "out_dir", "stage", "checkpoint_dir", "save_checkpoints",
             "record_runtime"}
_SUITE_KEYS = {"base", "methods", "betas", "seeds", "parallelism",
               "record_runtime", "out_dir", "export_attention"}


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_train(d: dict | None, where: str) -> TrainConfig | None:
    if d is None:
        return None
    _check_keys(d, _TRAIN_KEYS, where)
    return TrainConfig(**d)


def _parse_task(d: dict):
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("task must be an object with a 'kind' field")
    kind = d["kind"]
    rest = {k: v for k, v in d.items() if k != "kind"}
    if kind == "synthetic":
        _check_keys(rest, _SYNTH_KEYS, "task")
        return SyntheticTask(SyntheticSpec(**rest))
    if kind == "amazon":
        _check_keys(rest, _AMAZON_KEYS, "task")
        if "src_path" not in rest or "tgt_path" not in rest:
            raise ConfigError("amazon task needs src_path and tgt_path")
        return AmazonTask(src_path=rest["src_path"], tgt_path=rest["tgt_path"],
                          fmt=rest.get("format"), name=rest.get("name", ""))
    raise ConfigError(f"unknown task kind {kind!r}, expected 'synthetic' or 'amazon'")


def build_plan(cfg: dict, seed_override: int | None = None) -> ExperimentPlan:
    _check_keys(cfg, _RUN_KEYS, "run config")
    for key in ("task", "method"):
        if key not in cfg:
            raise ConfigError(f"run config missing required key {key!r}")
    kwargs = {"task": _parse_task(cfg["task"]), "method": cfg["method"]}
    for key in ("base_model", "beta", "seed", "k", "max_seq_len",
                "include_test_users_in_source", "finetune_items",
                "allow_off_grid_lr", "clip_low", "clip_high"):
        if key in cfg:
            kwargs[key] = cfg[key]
    for stage in ("pretrain", "bridge", "finetune"):
        parsed = _parse_train(cfg.get(stage), stage)
        if parsed is not None:
            kwargs[stage] = parsed
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return ExperimentPlan(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _out_dir(flag_value, cfg_value) -> Path:
    out = flag_value or cfg_value or os.environ.get(OUT_DIR_ENV) or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_report_files(rows, out_dir: Path) -> None:
    write_suite_csv(rows, out_dir / "report.csv")
    write_suite_json(rows, out_dir / "report.json")


def _write_traces(cold, out_dir: Path) -> None:
    for name, trace in cold.artifacts.items():
        if not name.endswith("_trace"):
            continue
        losses = trace["loss"] if isinstance(trace, dict) else trace
        if not losses:
            continue
        with open(out_dir / f"{name}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss"])
            for epoch, loss in enumerate(losses):
                writer.writerow([epoch, f"{loss:.8f}"])


def _export_attention(cold, path: Path) -> None:
    enc = cold.artifacts.get("enc")
    ctx = cold.artifacts.get("ctx")
    if enc is None or ctx is None:
        raise ConfigError("attention export needs a ptupcdr-family method")
    src_idx = [cold.src.users.index(u) for u in cold.split.test_users]
    rows = attention_table(enc, ctx, src_idx)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user", "item", "weight"])
        for u, i, w in rows:
            writer.writerow([cold.src.users.external(u), cold.src.items.external(i),
                             f"{w:.8f}"])
    logger.info("wrote %s (%d rows)", path, len(rows))


def _export_embeddings(cold, path: Path) -> None:
    k = cold.plan.k
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["user", "kind"] + [f"d{i}" for i in range(k)])
        for u in cold.split.test_users:
            if u in cold.init:
                writer.writerow([u, "transformed"] + [f"{x:.8f}" for x in cold.init[u]])
        tgt_model = cold.artifacts.get("tgt_model")
        if tgt_model is not None:
            for u in cold.split.train_overlap_users:
                vec = user_representation(tgt_model, cold.tgt.users.index(u))
                writer.writerow([u, "target"] + [f"{x:.8f}" for x in vec])
    logger.info("wrote %s", path)


def _save_checkpoints(cold, ckpt_dir: Path) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if "src_model" in cold.artifacts:
        save_model(ckpt_dir / "src_model", cold.artifacts["src_model"])
    if "tgt_model" in cold.artifacts:
        save_model(ckpt_dir / "tgt_model", cold.artifacts["tgt_model"])
    if "common_bridge" in cold.artifacts:
        checkpoint.save_tensors(ckpt_dir / "common_bridge",
                                {"W": cold.artifacts["common_bridge"]},
                                {"kind": "common_bridge"})
    if "enc" in cold.artifacts:
        save_bridge_nets(ckpt_dir / "bridge_nets", cold.artifacts["enc"],
                         cold.artifacts["meta"])


def _load_pretrained(cfg: dict, plan: ExperimentPlan) -> dict | None:
    if cfg.get("stage", "full") != "meta_only":
        return None
    if plan.method in ("tgt", "cmf"):
        raise ConfigError(f"stage 'meta_only' does not apply to method {plan.method!r}")
    ckpt_dir = cfg.get("checkpoint_dir")
    if not ckpt_dir:
        raise ConfigError("stage 'meta_only' needs checkpoint_dir")
    loaded = {}
    for name in ("src_model", "tgt_model"):
        prefix = Path(ckpt_dir) / name
        try:
            loaded[name] = load_model(prefix)
        except FileNotFoundError as exc:
            raise ConfigError(f"missing checkpoint artifact for {name}: {exc}") from None
    return loaded


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> int:
    if not 0.0 < args.beta < 1.0:
        raise ConfigError(f"--beta must be in (0, 1), got {args.beta}")
    src = load_domain(args.src, args.format)
    tgt = load_domain(args.tgt, args.format)
    split = make_split(src, tgt, args.beta, args.seed)
    out = _out_dir(args.out_dir, None)
    split.save(out / "split.json")
    for name, idmap in (("src_users", src.users), ("src_items", src.items),
                        ("tgt_users", tgt.users), ("tgt_items", tgt.items)):
        (out / f"{name}.json").write_text(
            json.dumps(idmap.backward, separators=(",", ":")) + "\n")
    print(f"wrote split and id maps to {out}", file=sys.stderr)
    return 0


def cmd_run(args) -> int:
    cfg = _load_json(args.config)
    plan = build_plan(cfg, args.seed)
    out = _out_dir(args.out_dir, cfg.get("out_dir"))
    pretrained = _load_pretrained(cfg, plan)

    # output files stay byte-identical across reruns unless timings are asked for
    record_runtime = bool(cfg.get("record_runtime", False))
    t0 = time.monotonic()
    cold = run_cold(plan, pretrained=pretrained)
    t1 = time.monotonic()
    warm = run_warm(plan, cold)
    t2 = time.monotonic()
    rows = []
    for report, t in ((cold.report, t1 - t0), (warm, t2 - t1)):
        rows.append({"task": plan.task.label, "beta": plan.beta, "method": plan.method,
                     "stage": report.stage, "seed": plan.seed, "mae": report.mae,
                     "rmse": report.rmse, "n_eval": report.n_eval,
                     "runtime_s": round(t, 3) if record_runtime else 0.0,
                     "counters": report.counters})
    _write_report_files(rows, out)
    _write_traces(cold, out)
    if cfg.get("save_checkpoints"):
        _save_checkpoints(cold, out / "checkpoints")
    print(f"cold mae={cold.report.mae:.4f} warm mae={warm.mae:.4f} -> {out}",
          file=sys.stderr)
    return 0


def cmd_suite(args) -> int:
    cfg = _load_json(args.config)
    _check_keys(cfg, _SUITE_KEYS, "suite config")
    if "base" not in cfg:
        raise ConfigError("suite config missing required key 'base'")
    base = build_plan(cfg["base"])
    seeds = [args.seed] if args.seed is not None else cfg.get("seeds")
    plans = sweep_plans(base, methods=cfg.get("methods"), betas=cfg.get("betas"),
                        seeds=seeds)
    out = _out_dir(args.out_dir, cfg.get("out_dir"))
    rows = run_suite(plans, parallelism=args.parallel or cfg.get("parallelism", 1),
                     record_runtime=cfg.get("record_runtime", False))
    write_suite_csv(rows, out / "suite.csv")
    write_suite_json(rows, out / "suite.json")

    if args.export_attention or cfg.get("export_attention"):
        done = set()
        for plan in plans:
            key = (plan.method, plan.beta)
            if plan.method not in BRIDGE_NET_METHODS or key in done:
                continue
            done.add(key)
            cold = run_cold(plan)
            _export_attention(cold, out / f"attention_{plan.method}_beta{plan.beta:g}.csv")
    n_failed = sum(1 for r in rows if r["stage"] == "failed")
    print(f"suite: {len(plans)} plans, {n_failed} failed -> {out}", file=sys.stderr)
    return 0 if n_failed == 0 else 1


def cmd_export(args) -> int:
    cfg = _load_json(args.config)
    plan = build_plan(cfg, args.seed)
    out = _out_dir(args.out_dir, cfg.get("out_dir"))
    cold = run_cold(plan, pretrained=_load_pretrained(cfg, plan))
    if args.what in ("attention", "both"):
        _export_attention(cold, out / "attention.csv")
    if args.what in ("embeddings", "both"):
        _export_embeddings(cold, out / "embeddings.csv")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgerec",
                                     description="cross-domain cold-start recommendation runner")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug (stderr)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a deterministic cold/warm split from two rating logs")
    p.add_argument("src", help="source-domain rating log")
    p.add_argument("tgt", help="target-domain rating log")
    p.add_argument("--beta", type=float, required=True, help="fraction of overlap users held out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "jsonl"], default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("run", help="run one experiment plan from a json config")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("suite", help="run a method/beta/seed sweep and tabulate results")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None, help="replace the seed list")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--parallel", type=int, default=None, help="plans to run concurrently")
    p.add_argument("--export-attention", action="store_true")
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("export", help="dump attention weights or transformed embeddings")
    p.add_argument("config")
    p.add_argument("--what", choices=["attention", "embeddings", "both"], default="both")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
