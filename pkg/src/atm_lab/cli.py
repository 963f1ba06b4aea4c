"""Command-line entry point: ``atm-lab {train,ablate,export,infer}``.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or corrupt file.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, pipeline
from .atm import RoutingError, gate_predict
from .conditioning import encode
from .numerics import NumericError, pca_2d
from .pipeline import ARMS, TrainConfig
from .serialization import (
    CheckpointError,
    ConfigError,
    apply_settings,
    atomic_write,
    config_text,
    load_checkpoint,
    parse_config_text,
    parse_overrides,
    report_text,
    save_checkpoint,
    table_csv,
    write_memory,
)
from .synthbench import MetricReport

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("atm_lab")


def build_config(preset: str, config_path: Optional[str], overrides: Sequence[str]) -> TrainConfig:
    try:
        config = pipeline.preset(preset)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{config_path}: cannot read config: {exc.strerror}") from None
        config = apply_settings(config, parse_config_text(text, config_path), config_path)
    if overrides:
        config = apply_settings(config, parse_overrides(overrides), "--set")
    return config


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("ATM_LAB_THREADS", "1")))
    except ValueError:
        return 1


def metric_values(m: MetricReport) -> dict[str, float]:
    out = {
        "gate_accuracy": m.gate_accuracy,
        "separation_ratio_raw": m.separation_ratio_raw,
        "separation_ratio_retrieved": m.separation_ratio_retrieved,
        "final_loss": m.final_loss,
        "struc_sim": m.struc_sim,
    }
    out.update({f"{k}_final_loss": v for k, v in m.stage_losses.items()})
    out.update(m.extras)
    return out


def acceptance_values(full: pipeline.RunResult, arms: dict[str, MetricReport]) -> dict[str, float]:
    m = full.metrics
    e = m.extras
    out = {
        "A3_gate_accuracy": full.stage1_gate_accuracy,
        "A4_stage2_leading_mean": e.get("stage2_leading_mean", float("nan")),
        "A4_stage2_trailing_mean": e.get("stage2_trailing_mean", float("nan")),
        "A5_stage2_final_loss": m.stage_losses.get("stage2", float("nan")),
        "A5_stage3_final_loss": m.stage_losses.get("stage3", float("nan")),
        "A6_compose_subject_err": e.get("compose_subject_err", float("nan")),
        "A6_baseline_subject_err": e.get("baseline_subject_err", float("nan")),
        "A6_compose_style_err": e.get("compose_style_err", float("nan")),
        "A6_baseline_style_err": e.get("baseline_style_err", float("nan")),
        "A7_full_final_loss": m.final_loss,
    }
    for arm, am in arms.items():
        out[f"A7_{arm}_final_loss"] = am.final_loss
        if arm == "no_gate":
            out["A7_no_gate_routing_accuracy"] = am.gate_accuracy
    out["A8_separation_ratio_raw"] = m.separation_ratio_raw
    out["A8_separation_ratio_retrieved"] = m.separation_ratio_retrieved
    return out


def cmd_train(args) -> int:
    config = build_config(args.preset, args.config, args.set)
    out = Path(args.out)
    t0 = time.perf_counter()
    full = pipeline.run(config, "full")
    arm_reports = {}
    arm_seconds = {}
    for arm in config.report_arms:
        if arm == "full":
            continue
        t = time.perf_counter()
        arm_reports[arm] = pipeline.run(config, arm).metrics
        arm_seconds[f"arm_{arm}_seconds"] = time.perf_counter() - t
    sections = {
        "run": {"artifact_version": __version__, "arm": "full"},
        "metrics.full": metric_values(full.metrics),
    }
    for arm, m in arm_reports.items():
        sections[f"metrics.{arm}"] = metric_values(m)
    sections["acceptance"] = acceptance_values(full, arm_reports)
    sections["losses"] = {f"stage{s}": ",".join(repr(v) for v in full.state.losses[s]) for s in (1, 2, 3)}
    timing = {f"stage{s}_seconds": v for s, v in full.stage_seconds.items()}
    timing.update(arm_seconds)
    timing["total_seconds"] = time.perf_counter() - t0
    save_checkpoint(full.state, out / "checkpoint.bin")
    atomic_write(out / "config.cfg", config_text(config))
    atomic_write(out / "report.txt", report_text(config, sections, timing, __version__))
    log.info("wrote %s", out / "report.txt")
    print(f"train: final_loss={full.metrics.final_loss:.6f} gate_acc={full.metrics.gate_accuracy:.3f} "
          f"report={out / 'report.txt'}")
    return EXIT_OK


def parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        sep = ".." if ".." in part else ("-" if "-" in part[1:] else None)
        try:
            if sep:
                lo, hi = part.split(sep, 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise ConfigError(f"--seeds: cannot parse {part!r}") from None
    if not seeds:
        raise ConfigError("--seeds: no seeds given")
    return seeds


def parse_arms(text: str) -> list[str]:
    arms = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise ConfigError(f"--arms: unknown arm(s) {bad}; valid arms: {', '.join(ARMS)}")
    return arms


def _ablation_job(job) -> MetricReport:
    config, arm = job
    return pipeline.run(config, arm).metrics


def run_ablation_table(config: TrainConfig, arms: Sequence[str], seeds: Sequence[int]) -> list[MetricReport]:
    jobs = [(replace(config, seed=s), arm) for s in seeds for arm in arms]
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablation_job, jobs))
    return [_ablation_job(j) for j in jobs]


def cmd_ablate(args) -> int:
    arms = parse_arms(args.arms)
    seeds = parse_seeds(args.seeds)
    config = build_config(args.preset, args.config, args.set)
    reports = run_ablation_table(config, arms, seeds)
    text = table_csv("ablation", MetricReport.CSV_COLUMNS, [r.csv_row() for r in reports])
    path = atomic_write(Path(args.out) / "ablation.csv", text)
    print(f"ablate: {len(reports)} rows -> {path}")
    return EXIT_OK


def projection_rows(state: pipeline.TrainState, samples: int) -> list[list[object]]:
    """PCA-2D coordinates of pooled raw queries, pooled retrieved queries, and memory rows."""
    _, held_out, _ = pipeline.load_data(state.config)
    count = min(samples, len(held_out))
    x, labels = held_out.x[:count], held_out.tasks[:count]
    raw = pipeline.pooled_queries(state, x)
    routes = pipeline.eval_routes(state, held_out)[:count]
    _, retrieved = pipeline.predict_batch(state, x, routes, use_details=False)
    memory = np.vstack(state.bank.items)
    coords = pca_2d(np.vstack([raw, retrieved, memory]))
    kinds = ["raw"] * count + ["retrieved"] * count + ["memory"] * memory.shape[0]
    mem_labels = np.repeat(np.arange(state.bank.n), state.bank.m)
    all_labels = np.concatenate([labels, labels, mem_labels])
    return [[float(cx), float(cy), int(lab), kind] for (cx, cy), lab, kind in zip(coords, all_labels, kinds)]


def cmd_export(args) -> int:
    state = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    if args.what == "memory":
        paths = write_memory(state.bank, out)
        print(f"export: {len(paths)} memory items -> {out}")
    else:
        samples = args.samples or state.config.n_eval
        rows = projection_rows(state, samples)
        path = atomic_write(out / "projection.csv", table_csv("projection", ["x", "y", "label", "kind"], rows))
        print(f"export: {len(rows)} projection rows -> {path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if not state.finished:
        raise CheckpointError(f"{args.checkpoint}: checkpoint is not from a completed run")
    if args.x is not None:
        try:
            x = np.array([[float(v) for v in args.x.split(",")]])
        except ValueError:
            raise ConfigError(f"--x: cannot parse {args.x!r}") from None
        if x.shape[1] != state.config.dims.d:
            raise ConfigError(f"--x: expected {state.config.dims.d} values, got {x.shape[1]}")
    else:
        _, held_out, _ = pipeline.load_data(state.config)
        if not 0 <= args.sample < len(held_out):
            raise ConfigError(f"--sample must lie in [0, {len(held_out)})")
        x = held_out.x[args.sample:args.sample + 1]
    routed = args.task if args.task is not None else gate_predict(state.gate, encode(state.encoder, state.qbank, x))[0]
    y = pipeline.infer(state, x, args.task)
    print(f"task,{routed}")
    print("output," + ",".join(repr(float(v)) for v in y[0]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atm-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override (repeatable)")
        p.add_argument("--preset", choices=sorted(pipeline.PRESETS), default="desk")

    p = sub.add_parser("train", help="run all three stages and write checkpoint + report")
    config_flags(p)
    p.add_argument("--out", metavar="DIR", default="runs/train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run ablation arms over seeds and write a CSV")
    config_flags(p)
    p.add_argument("--arms", default=",".join(ARMS), help=f"comma list from {', '.join(ARMS)}")
    p.add_argument("--seeds", default="1..5", help="comma list and/or ranges like 1..5")
    p.add_argument("--out", metavar="DIR", default="runs/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="dump memory items or a 2-D projection from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("what", choices=["memory", "projection"])
    p.add_argument("--out", metavar="DIR", default="runs/export")
    p.add_argument("--samples", type=int, default=0, help="held-out samples to project (default n_eval)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", help="decode one condition with a trained checkpoint")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--x", help="comma-separated condition vector")
    src.add_argument("--sample", type=int, help="index into the regenerated held-out split")
    p.add_argument("--task", type=int, default=None, help="route to this memory item instead of the gate")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, RoutingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
