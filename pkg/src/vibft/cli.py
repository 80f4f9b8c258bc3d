"""``vibft`` command line: generate, train, sweep, probe, curve, inspect-checkpoint.

Experiments are described by JSON config files carrying ``schema_version``
and ``kind``.  Flags only override scalar fields.  Exit codes: 0 success,
1 run failure, 2 config/validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

from . import analysis, data as datamod
from .data import DataError, SyntheticSpec
from .training import (
    ConfigError,
    IntegrityError,
    RunConfig,
    RunRecord,
    config_from_dict,
    load_checkpoint,
    train,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
RESULTS_LOG = "results.jsonl"

log = logging.getLogger("vibft")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def results_root(override: str | None = None) -> Path:
    return Path(override or os.environ.get("VIB_RESULTS_DIR", "results"))


def read_config(path, kind: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config must be a JSON object", EXIT_CONFIG)
    version = raw.pop("schema_version", None)
    if version is None:
        raise CliError(f"{path}: schema_version is required", EXIT_CONFIG)
    if version != SCHEMA_VERSION:
        raise CliError(f"{path}: unsupported schema_version {version}", EXIT_CONFIG)
    found = raw.pop("kind", kind)
    if found != kind:
        raise CliError(f"{path}: expected a {kind!r} config, got {found!r}", EXIT_CONFIG)
    return raw


def _strict(raw: Mapping, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def parse_synthetic(raw: Mapping) -> tuple[SyntheticSpec, dict]:
    _strict(raw, {"spec", "sizes"}, "synthetic config")
    spec_raw = raw.get("spec", {})
    _strict(spec_raw, {f.name for f in dataclasses.fields(SyntheticSpec)}, "spec")
    try:
        spec = SyntheticSpec(**spec_raw)
    except DataError as exc:
        raise ConfigError(f"spec.{exc}") from None
    sizes = dict(raw.get("sizes", datamod.DEFAULT_SIZES))
    return spec, sizes


def materialized(kind: str, body: Mapping) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, **body}


def append_line(path: Path, line: str) -> None:
    """Append one line with a single ``write`` on an ``O_APPEND`` descriptor."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    try:
        os.write(fd, (line.rstrip("\n") + "\n").encode())
    finally:
        os.close(fd)


def read_log(path) -> list[RunRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(RunRecord.from_json(json.loads(line)))
    return records


def load_dataset(ref: str | None):
    if not ref:
        raise ConfigError("dataset: a dataset directory is required")
    try:
        return datamod.load_splits(ref)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from None


def cmd_generate(args) -> int:
    spec, sizes = parse_synthetic(read_config(args.config, "synthetic"))
    out = Path(args.out) if args.out else results_root(args.results) / "datasets" / f"synthetic-{spec.seed}"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} already exists; pass --force to overwrite", EXIT_IO)
    splits = datamod.generate(spec, sizes)
    manifest = datamod.export_splits(
        splits, out, {"config": materialized("synthetic", {"spec": dataclasses.asdict(spec), "sizes": sizes})}
    )
    print(json.dumps({"out": str(out), "splits": manifest["splits"]}, sort_keys=True))
    return EXIT_OK


def _run_config(raw: Mapping, args) -> RunConfig:
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode, **({"beta0": 0.0} if args.mode == "ablation_deterministic" else {}))
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _run_config(read_config(args.config, "run"), args)
    splits = load_dataset(cfg.dataset)
    root = results_root(args.results)
    ckpt = root / "checkpoints" / f"{cfg.run_id()}.ckpt"
    record = train(cfg, splits, checkpoint_path=ckpt)
    append_line(root / RESULTS_LOG, record.to_line())
    print(json.dumps({"run_id": record.run_id, "status": record.status, "best_epoch": record.best_epoch,
                      "test_metrics": record.test_metrics, "checkpoint": record.checkpoint}, sort_keys=True))
    return EXIT_OK if record.ok else EXIT_RUN_FAILED


def parse_sweep(raw: Mapping) -> tuple[analysis.SweepSpec, str]:
    _strict(raw, {"base", "grid", "seeds", "sweep_id"}, "sweep config")
    base = RunConfig.from_dict(raw.get("base", {})).validate()
    spec = analysis.SweepSpec(base, {k: list(v) for k, v in raw.get("grid", {}).items()}, list(raw.get("seeds", [0])))
    return spec, str(raw.get("sweep_id", "sweep"))


def cmd_sweep(args) -> int:
    spec, sweep_id = parse_sweep(read_config(args.config, "sweep"))
    if args.seed is not None:
        spec = replace(spec, seeds=[args.seed])
    splits = load_dataset(spec.base.dataset)
    root = results_root(args.results)
    result = analysis.run_sweep(spec, splits, jobs=args.jobs)
    for r in result.records:
        append_line(root / RESULTS_LOG, r.to_line())
    rows = [{**{k: s.cell.get(k) for k in spec.grid}, "mean_val": s.mean_val, "std_val": s.std_val,
             "mean_test": s.mean_test, "runs": s.runs, "failed": s.failed} for s in result.cells]
    summary = {
        "config": materialized("sweep", {"base": spec.base.to_dict(), "grid": dict(spec.grid),
                                         "seeds": list(spec.seeds), "sweep_id": sweep_id}),
        "best_cell": result.best.cell if result.best else None,
        "cells": [dataclasses.asdict(s) for s in result.cells],
        "failed_runs": [{"run_id": r.run_id, "cell": r.cell, "seed": r.seed, "error": r.error}
                        for r in result.failures],
    }
    csv_path, json_path = analysis.write_outputs(root, f"sweep-{sweep_id}", spec.base, rows, summary)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path), "best_cell": summary["best_cell"],
                      "failed": len(result.failures)}, sort_keys=True))
    return EXIT_RUN_FAILED if result.failures else EXIT_OK


def cmd_probe(args) -> int:
    raw = read_config(args.config, "probe")
    _strict(raw, {"checkpoint", "dataset", "input_mode", "columns", "probe"}, "probe config")
    probe_cfg = config_from_dict(analysis.ProbeConfig, raw.get("probe", {}), "probe.")
    probe_cfg = replace(probe_cfg, hidden=tuple(probe_cfg.hidden))
    mode = args.input_mode or raw.get("input_mode", "posterior-samples")
    if mode not in analysis.PROBE_MODES:
        raise ConfigError(f"input_mode: must be one of {analysis.PROBE_MODES}")
    splits = load_dataset(raw.get("dataset"))
    model, run_id = None, None
    if raw.get("checkpoint"):
        try:
            ckpt = load_checkpoint(raw["checkpoint"])
        except FileNotFoundError:
            raise CliError(f"checkpoint not found: {raw['checkpoint']}", EXIT_IO) from None
        model, run_id = ckpt.build_model(), ckpt.config.run_id()
    elif mode == "posterior-samples":
        raise ConfigError("checkpoint: posterior-samples probes need a trained checkpoint")
    report = analysis.bias_probe(model, splits, mode, raw.get("columns"), probe_cfg, run_id)
    root = results_root(args.results)
    row = {k: v for k, v in dataclasses.asdict(report).items() if k != "columns"}
    summary = {"config": materialized("probe", {**raw, "input_mode": mode, "probe": dataclasses.asdict(probe_cfg)}),
               "report": dataclasses.asdict(report)}
    stem = f"probe-{mode}-{run_id or 'raw'}"
    base = ckpt.config if model is not None else RunConfig()
    csv_path, json_path = analysis.write_outputs(root, stem, base, [row], summary)
    print(json.dumps({"csv": str(csv_path), "json": str(json_path), "test_accuracy": report.test_accuracy,
                      "chance": report.chance, "status": report.status}, sort_keys=True))
    return EXIT_OK if report.status == "ok" else EXIT_RUN_FAILED


def cmd_curve(args) -> int:
    root = results_root(args.results)
    if args.kind == "expected-max":
        if not args.log:
            raise ConfigError("--log: expected-max curves read a results log")
        try:
            records = read_log(args.log)
        except FileNotFoundError:
            raise CliError(f"results log not found: {args.log}", EXIT_IO) from None
        values = [r.test_metric for r in records if r.ok and r.test_metric is not None]
        curve = analysis.expected_max_curve(values)
        rows = [dataclasses.asdict(p) for p in curve]
        summary = {"kind": "expected-max", "log": str(args.log), "num_records": len(values), "curve": rows}
        base = RunConfig.from_dict(records[0].config) if records else RunConfig()
        csv_path, json_path = analysis.write_outputs(root, "curve-expected-max", base, rows, summary)
    else:
        if not args.config:
            raise ConfigError("beta curves need a config file")
        raw = read_config(args.config, "beta_curve")
        _strict(raw, {"base", "betas"}, "beta_curve config")
        base = RunConfig.from_dict(raw.get("base", {})).validate()
        betas = [float(b) for b in raw.get("betas", [])]
        rows = [dataclasses.asdict(r) for r in analysis.beta_sweep_curves(base, betas, load_dataset(base.dataset), args.jobs)]
        summary = {"config": materialized("beta_curve", {"base": base.to_dict(), "betas": betas}), "rows": rows}
        csv_path, json_path = analysis.write_outputs(root, "curve-beta", base, rows, summary)
        if any(r["status"] != "ok" for r in rows):
            print(json.dumps({"csv": str(csv_path), "json": str(json_path)}))
            return EXIT_RUN_FAILED
    print(json.dumps({"csv": str(csv_path), "json": str(json_path), "rows": len(rows)}, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_IO) from None
    info = {
        "version": ckpt.version,
        "run_id": ckpt.config.run_id(),
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "tensors": {name: list(t.shape) for name, t in sorted(ckpt.tensors.items())},
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vibft", description=__doc__.splitlines()[0])
    p.add_argument("--results", help="output root (default: $VIB_RESULTS_DIR or ./results)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("config")
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one run and append its record")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--mode", choices=["vib", "ablation_deterministic", "baseline"])
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid search over a base run config")
    s.add_argument("config")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("probe", help="bias probe on a frozen checkpoint")
    pr.add_argument("config")
    pr.add_argument("--input-mode", choices=list(analysis.PROBE_MODES))
    pr.set_defaults(func=cmd_probe)

    c = sub.add_parser("curve", help="expected-max or beta curves")
    c.add_argument("config", nargs="?")
    c.add_argument("--kind", choices=["expected-max", "beta"], default="expected-max")
    c.add_argument("--log", help="results log for expected-max curves")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_curve)

    i = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
