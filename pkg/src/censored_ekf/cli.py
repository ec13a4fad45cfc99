"""Command-line front end: ``censored-ekf {simulate,filter,sweep,report}``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FilterError
from .censored import FilterStepError
from .models import ConfigurationError
from .scenario import (
    DatasetError,
    ScenarioConfig,
    build_scenario,
    config_keys_help,
    dataset_sigmas,
    filter_dataset,
    fmt,
    load_config,
    read_dataset,
    read_results,
    read_truth,
    simulate,
    summarize,
    truth_sigmas,
    write_dataset,
    write_results,
    write_truth,
)

logger = logging.getLogger("censored_ekf")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
LOG_ENV = "CENSOR_EKF_LOG"


class UsageError(ValueError):
    """Invalid invocation (bad paths, overlapping outputs, empty seed range)."""


def shipped_configs() -> list[str]:
    root = resources.files("censored_ekf") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config_path(name: str) -> Path:
    """A config file path, or the name of a shipped config."""
    p = Path(name)
    if p.exists():
        return p
    if p.suffix == "" and name in shipped_configs():
        return Path(str(resources.files("censored_ekf") / "configs" / f"{name}.json"))
    raise UsageError(f"config file not found: {name} (shipped configs: {', '.join(shipped_configs())})")


def _load(args) -> ScenarioConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "plain_ekf", False):
        overrides.append("filter.plain_ekf=true")
    return load_config(resolve_config_path(args.config), overrides)


def _out_paths(cfg: ScenarioConfig, out: Path) -> dict[str, Path]:
    paths = {k: out / v for k, v in cfg.outputs.model_dump().items()}
    resolved = [p.resolve() for p in paths.values()]
    if len(set(resolved)) != len(resolved):
        raise UsageError("output paths in the config collide with each other")
    return paths


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def _write_json(obj, path: Path) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ------------------------------------------------------------------ commands

def cmd_simulate(args) -> int:
    cfg = _load(args)
    paths = _out_paths(cfg, Path(args.out))
    sc = build_scenario(cfg)
    ds, truth, sigmas = simulate(sc)
    for key in ("dataset", "truth"):
        _ensure_parent(paths[key])
    write_dataset(ds, paths["dataset"])
    write_truth(truth, paths["truth"])
    print(f"wrote {len(ds)} observations ({ds.censored_fraction:.1%} censored) to {paths['dataset']}")
    print(f"wrote truth to {paths['truth']}")
    for ch, s in sigmas.items():
        print(f"noise sd {ch}: {s:.6g}")
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = _load(args)
    paths = _out_paths(cfg, Path(args.out))
    dpath = Path(args.dataset) if args.dataset else paths["dataset"]
    if not dpath.exists():
        raise UsageError(f"dataset file not found: {dpath}")
    tpath = Path(args.truth) if args.truth else None
    if tpath is not None and not tpath.exists():
        raise UsageError(f"truth file not found: {tpath}")
    sc = build_scenario(cfg)
    ds = read_dataset(dpath)
    truth = read_truth(tpath) if tpath else None
    if truth is not None:
        sigmas = truth_sigmas(sc, truth)
    else:
        sigmas = dataset_sigmas(ds, cfg.observations.noise_level)
        if cfg.filter.observation_noise == "auto":
            logger.warning("no truth file: observation noise estimated from the noisy dataset")
    result = filter_dataset(sc, ds, sigmas)
    _ensure_parent(paths["results"])
    write_results(result, paths["results"])
    summary = summarize(sc, result, truth, ds)
    _write_json(summary, paths["summary"])
    print_summary(summary)
    print(f"wrote results to {paths['results']}")
    return EXIT_OK


def print_summary(summary: dict) -> None:
    print(f"scenario {summary['scenario']} seed {summary['seed']}: {summary['steps']} steps, "
          f"final time {summary['final_time']:.6g}")
    for name, v in summary.get("parameters", {}).items():
        print(f"  {name} = {v['estimate']:.6g}  95% [{v['lo']:.6g}, {v['hi']:.6g}]")
    if "rmse" in summary:
        print("  rmse vs truth: " + ", ".join(f"{k}={v:.4g}" for k, v in summary["rmse"].items()))


def parse_seeds(text: str) -> list[int]:
    """``a:b`` (half-open) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        a, b = text.split(":", 1)
        seeds = list(range(int(a), int(b)))
    else:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    if not seeds:
        raise UsageError(f"seed range {text!r} is empty")
    if len(set(seeds)) != len(seeds):
        raise UsageError("seed list repeats a seed; per-seed outputs would overlap")
    return seeds


def _sweep_one(cfg_data: dict, seed: int, out: str, plain_ekf: bool) -> dict:
    """Worker: simulate, filter and write one seed. Returns its summary or an error record."""
    from .scenario import run_scenario

    try:
        data = dict(cfg_data, seed=seed)
        cfg = ScenarioConfig.model_validate(data)
        run = run_scenario(cfg, plain_ekf=plain_ekf or None)
        paths = _out_paths(cfg, Path(out))
        _ensure_parent(paths["dataset"])
        write_dataset(run.dataset, paths["dataset"])
        write_truth(run.truth, paths["truth"])
        write_results(run.result, paths["results"])
        summary = dict(run.summary, seconds=run.seconds)
        _write_json(summary, paths["summary"])
        return {"seed": seed, "ok": True, "summary": summary}
    except Exception as exc:  # recorded per seed; the sweep decides the exit code
        return {"seed": seed, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(args) -> int:
    cfg = _load(args)
    seeds = parse_seeds(args.seeds)
    out = Path(args.out)
    for name, rel in cfg.outputs.model_dump().items():
        if Path(rel).is_absolute() or ".." in Path(rel).parts:
            raise UsageError(f"output {name}={rel} would be shared across seeds; use a relative path")
    dirs = [out / f"seed-{s}" for s in seeds]
    for s, d in zip(seeds, dirs):
        _out_paths(cfg, d)
    data = cfg.model_dump(mode="json")
    workers = args.workers or min(len(seeds), os.cpu_count() or 1)
    if workers <= 1:
        records = [_sweep_one(data, s, str(d), args.plain_ekf) for s, d in zip(seeds, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_sweep_one, data, s, str(d), args.plain_ekf) for s, d in zip(seeds, dirs)]
            records = [f.result() for f in futs]
    agg = aggregate(records)
    _write_json(agg, out / "aggregate.json")
    for r in records:
        if r["ok"]:
            print_summary(r["summary"])
        else:
            print(f"seed {r['seed']} FAILED: {r['error']}")
    for name, st in agg["parameters"].items():
        print(f"aggregate {name}: mean {st['mean']:.6g} sd {st['sd']:.6g} over {st['n']} seeds")
    print(f"{agg['succeeded']}/{len(seeds)} seeds succeeded; aggregate written to {out / 'aggregate.json'}")
    return EXIT_OK if agg["succeeded"] else EXIT_RUNTIME


def aggregate(records: Sequence[dict]) -> dict:
    ok = [r["summary"] for r in records if r["ok"]]

    def stats(values):
        a = np.asarray(values, dtype=float)
        return {"mean": float(a.mean()), "sd": float(a.std(ddof=1)) if a.size > 1 else 0.0, "n": int(a.size)}

    params = {}
    for name in (ok[0].get("parameters", {}) if ok else {}):
        params[name] = stats([s["parameters"][name]["estimate"] for s in ok])
    rmse = {}
    for name in (ok[0].get("rmse", {}) if ok else {}):
        rmse[name] = stats([s["rmse"][name] for s in ok])
    return {
        "seeds": [r["seed"] for r in records],
        "succeeded": len(ok),
        "failures": {str(r["seed"]): r["error"] for r in records if not r["ok"]},
        "parameters": params,
        "rmse": rmse,
        "per_seed": {str(s["seed"]): s.get("parameters", {}) for s in ok},
    }


REPORT_COLUMNS = ("variable", "series", "time", "value", "censored")


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        if not Path(path).exists():
            raise UsageError(f"results file not found: {path}")
        table = read_results(path)
        t = table.columns["time"]
        for nm in table.state_names:
            for series in ("mean", "lo", "hi"):
                for ti, v in zip(t, table.columns[f"{nm}_{series}"]):
                    label = "estimate" if series == "mean" else series
                    rows.append((nm, label, ti, v, 0))
    if args.truth:
        truth = read_truth(args.truth)
        for j, nm in enumerate(truth.names):
            rows += [(nm, "truth", ti, v, 0) for ti, v in zip(truth.times, truth.states[:, j])]
    if args.dataset:
        ds = read_dataset(args.dataset)
        for t, ch, v, cens, _, _ in ds.rows():
            rows.append((ch, "observation", t, v, int(cens)))
    out = Path(args.out) / args.name
    _ensure_parent(out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for var, series, ti, v, c in rows:
            w.writerow([var, series, fmt(ti), fmt(v), c])
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (JSON, unknown keys rejected):\n" + config_keys_help()
              + f"\n\nshipped configs: {', '.join(shipped_configs())}"
              + f"\nenvironment: {LOG_ENV}=DEBUG|INFO|WARNING sets diagnostic verbosity"
              + "\nexit codes: 0 success, 1 runtime failure, 2 validation failure")
    parser = argparse.ArgumentParser(prog="censored-ekf", description=__doc__.splitlines()[0],
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="config JSON path or shipped config name")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override a config key (dotted path, JSON value); repeatable")
            p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")

    p = sub.add_parser("simulate", help="write a synthetic dataset and its ground truth")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="run the censored filter over a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset CSV (default: the config's dataset output under --out)")
    p.add_argument("--truth", help="ground-truth CSV for RMSE and exact noise levels")
    p.add_argument("--plain-ekf", action="store_true", help="treat censored values as exact measurements")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("sweep", help="simulate and filter many seeds in parallel")
    common(p)
    p.add_argument("--seeds", required=True, help="seed range a:b (half-open) or list a,b,c")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: one per seed, up to CPUs)")
    p.add_argument("--plain-ekf", action="store_true", help="treat censored values as exact measurements")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="long-format plot table from results (and optional truth/dataset)")
    common(p, with_config=False)
    p.add_argument("--results", nargs="+", required=True, help="results CSV file(s)")
    p.add_argument("--truth", help="ground-truth CSV")
    p.add_argument("--dataset", help="dataset CSV (observations per channel)")
    p.add_argument("--name", default="report.csv", help="output file name inside --out")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetError, UsageError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FilterStepError, FilterError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
