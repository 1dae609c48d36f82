"""Command line entry point: ``incremad synth|run|grid|report``.

Errors are printed to stderr as one JSON object and mapped to exit codes:
2 bad arguments or configuration, 3 malformed data, 4 a run failed,
5 an I/O problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data_io import SynthSourceSpec, load_any, save_csv, save_dataset, synth_sources
from .errors import (
    ConfigError,
    FormatError,
    IncremadError,
    IntegrityError,
    LabelError,
    ShapeError,
)
from .runner import (
    DEFAULT_LAMBDAS,
    RunConfig,
    RunError,
    emit_results,
    grid_sweep,
    read_runs_csv,
    report,
    run_batch,
    write_manifest,
    write_matrix_csv,
)
from .stream import CHUNK_SIZES, SizeSchedule, enumerate_orders
from .strategies import KINDS, StrategyConfig

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUN = 4
EXIT_IO = 5


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would print free-form usage text and exit; route it through
    # the structured error path instead
    def error(self, message):
        raise UsageError(message)


def _fail(exc: BaseException) -> int:
    if isinstance(exc, (FormatError, LabelError, ShapeError, IntegrityError)):
        code = EXIT_DATA
    elif isinstance(exc, ConfigError):
        code = EXIT_USAGE
    elif isinstance(exc, IncremadError):
        code = EXIT_RUN
    else:
        code = EXIT_IO
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("experience_index", "offset"):
        if getattr(exc, attr, None) is not None:
            payload[attr] = getattr(exc, attr)
    if isinstance(exc, OSError) and exc.filename:
        payload["path"] = str(exc.filename)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


# argument helpers --------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _parse_orders(text: str, n_sources: int) -> list[tuple[int, ...] | None]:
    """``all``, ``identity`` or one or more permutations like ``2-0-3-1,0-1-2-3``."""
    if text == "all":
        return [tuple(o) for o in enumerate_orders(n_sources)]
    if text == "identity":
        return [None]
    orders = []
    for part in text.split(","):
        try:
            perm = tuple(int(v) for v in part.replace(" ", "").split("-"))
        except ValueError:
            raise UsageError(f"bad order {part!r}; use e.g. 2-0-3-1") from None
        if sorted(perm) != list(range(n_sources)):
            raise UsageError(f"order {part!r} is not a permutation of {n_sources} sources")
        orders.append(perm)
    return orders


def _resolve_data(args) -> tuple[list[Path], Path]:
    if args.data:
        root = Path(args.data)
        if not root.is_dir():
            raise ConfigError(f"data directory {root} does not exist")
        sources = sorted(p for p in root.iterdir()
                         if p.name.startswith("source") and p.suffix in (".clf", ".csv"))
        tests = [p for p in root.iterdir() if p.stem == "test" and p.suffix in (".clf", ".csv")]
        if not sources or len(tests) != 1:
            raise ConfigError(f"{root} must hold source*.clf|csv files and one test file")
        return sources, tests[0]
    if not args.sources or not args.test:
        raise ConfigError("give --data DIR or both --sources and --test")
    paths = [Path(p) for p in args.sources] + [Path(args.test)]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"dataset file {p} does not exist")
    return paths[:-1], paths[-1]


def _load(args):
    source_paths, test_path = _resolve_data(args)
    sources = [load_any(p) for p in source_paths]
    return source_paths, test_path, sources, load_any(test_path)


def _strategy(args, kind: str, lam: float | None) -> StrategyConfig:
    changes = {"kind": kind}
    if lam is None:
        # no --lambda: the first point of the profile grid for LwF, library defaults otherwise
        if kind == "lwf":
            changes["lambda_lwf"] = float(DEFAULT_LAMBDAS[args.profile][0])
    elif kind == "lwf":
        changes["lambda_lwf"] = lam
    elif kind == "ewc":
        changes["lambda_ewc"] = lam
    elif kind == "si":
        changes["si_c"] = lam
    if args.epochs is not None:
        changes["epochs_per_experience"] = args.epochs
    return StrategyConfig(**changes)


def _reps(args, default_mad: int) -> int:
    reps = args.reps if args.reps is not None else (10 if args.profile == "cls" else default_mad)
    if reps < 1:
        raise UsageError("--reps must be at least 1")
    return reps


def _hidden(args) -> tuple[int, ...]:
    return tuple(args.hidden) if args.hidden else RunConfig().hidden


# subcommands ---------------------------------------------------------------

def cmd_synth(args) -> dict:
    n_classes = args.classes or (2 if args.profile == "mad" else 10)
    spec = SynthSourceSpec(n_sources=args.n_sources, shift=args.shift, per_class=args.per_class,
                           dim=args.dim, seed=args.seed, n_classes=n_classes,
                           class_sep=args.class_sep, test_per_class=args.test_per_class,
                           feature_scale=args.feature_scale)
    sources, test = synth_sources(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for j, ds in enumerate([*sources, test]):
        stem = "test" if j == len(sources) else f"source{j}"
        if args.format == "csv":
            path = out / f"{stem}.csv"
            save_csv(ds, path)
        else:
            path = out / f"{stem}.clf"
            save_dataset(ds, path, float_width=args.float_width)
        files.append(path.name)
    write_manifest(out / "manifest.json", {"synth": vars(spec)}, [args.seed], {"files": files})
    return {"written": files}


def cmd_run(args) -> dict:
    source_paths, test_path, sources, test_set = _load(args)
    schedule = SizeSchedule.parse(args.schedule)
    orders = _parse_orders(args.orders, len(sources))
    reps = _reps(args, 1)
    lambdas = _float_list(args.lam) if args.lam else [None]
    kinds = [k.strip() for k in args.strategy.split(",") if k.strip()]
    for k in kinds:
        if k not in KINDS:
            raise UsageError(f"unknown strategy {k!r}; expected one of {KINDS}")
    configs = []
    for rep in range(reps):
        seed = args.seed + rep
        if "joint" in kinds or not args.no_joint:
            configs.append(RunConfig(_strategy(args, "joint", None), schedule, None, seed,
                                     args.profile, _hidden(args), source_paths, test_path))
        for kind in kinds:
            if kind == "joint":
                continue
            for lam in (lambdas if kind in ("lwf", "ewc", "si") else [None]):
                for order in orders:
                    configs.append(RunConfig(_strategy(args, kind, lam), schedule, order, seed,
                                             args.profile, _hidden(args), source_paths,
                                             test_path))
    results, failed = run_batch(configs, sources, test_set, args.workers)
    emit_results(results, args.out, {r.run_id: r.config.to_dict() for r in results},
                 [args.seed + r for r in range(reps)])
    if failed:
        first = min(failed)
        raise RunError(f"{len(failed)} of {len(configs)} runs failed; first: {failed[first]}")
    return {"runs": len(results), "out": str(args.out)}


def cmd_grid(args) -> dict:
    source_paths, test_path, sources, test_set = _load(args)
    sizes = _int_list(args.sizes) if args.sizes else list(CHUNK_SIZES)
    lambdas = _float_list(args.lam) if args.lam else list(DEFAULT_LAMBDAS[args.profile])
    orders = _parse_orders(args.orders, len(sources))
    orders = [o if o is not None else tuple(range(len(sources))) for o in orders]
    reps = _reps(args, 5)
    base = RunConfig(_strategy(args, "lwf", None), SizeSchedule("fixed", sizes[0]), None,
                     args.seed, args.profile, _hidden(args), source_paths, test_path)
    result = grid_sweep(sizes, lambdas, base, reps, orders, sources, test_set,
                        args.workers, keep_runs=args.keep_runs)
    emit_results(result, args.out, {"base": base.to_dict(), "sizes": sizes,
                                    "lambdas": lambdas, "orders": orders, "reps": reps},
                 [args.seed])
    return {"cells": int(result.counts.size), "failures": len(result.failures),
            "out": str(args.out)}


def cmd_report(args) -> dict:
    rows = read_runs_csv(args.runs)
    if not rows:
        raise FormatError(f"{args.runs} holds no runs")
    res = report(rows, args.profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = ["strategy", "lambda", "size_mode", "n_runs", "mean_auc", "mean_deviation_pct"]
        writer.writerow(cols)
        for row in res["summary"]:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    with open(out / "report_brot.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = ["strategy", "lambda", "n_groups", "brot"]
        writer.writerow(cols)
        for row in res["brot"]:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    written = ["report_summary.csv", "report_brot.csv"]
    # LwF rows over fixed sizes also give a size x lambda deviation matrix
    cells = {}
    for row in res["summary"]:
        if row["strategy"] == "lwf" and row["size_mode"].startswith("fixed:"):
            cells[(int(row["size_mode"].split(":")[1]), row["lambda"])] = row["mean_deviation_pct"]
    if cells:
        sizes = sorted({s for s, _ in cells})
        lambdas = sorted({lam for _, lam in cells})
        mat = np.array([[cells.get((s, lam), np.nan) for lam in lambdas] for s in sizes])
        write_matrix_csv(mat, sizes, lambdas, out / "report_deviation.csv")
        written.append("report_deviation.csv")
    return {"written": written, "algorithms": len(res["summary"])}


# parser ----------------------------------------------------------------------

def _add_common(p, schedule=True):
    p.add_argument("--data", help="directory written by `synth` (source*.clf + test.clf)")
    p.add_argument("--sources", nargs="+", help="training source files, in default order")
    p.add_argument("--test", help="fixed test set file")
    p.add_argument("--profile", choices=("mad", "cls"), default="mad")
    p.add_argument("--orders", default="identity",
                   help="all | identity | permutations such as 2-0-3-1[,0-1-2-3]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=None,
                   help="repetitions (default: 10 for cls; 1 per run, 5 per grid cell for mad)")
    p.add_argument("--lambda", dest="lam", default=None,
                   help="comma-separated regularisation strengths")
    p.add_argument("--epochs", type=int, default=None, help="epochs per experience")
    p.add_argument("--hidden", type=int, nargs="+", default=None, help="hidden layer widths")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="incremad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic sources and a test set")
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("mad", "cls"), default="mad")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-sources", type=int, default=4)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=SynthSourceSpec.per_class)
    p.add_argument("--test-per-class", type=int, default=SynthSourceSpec.test_per_class)
    p.add_argument("--shift", type=float, default=SynthSourceSpec.shift)
    p.add_argument("--class-sep", type=float, default=SynthSourceSpec.class_sep)
    p.add_argument("--feature-scale", type=float, default=SynthSourceSpec.feature_scale)
    p.add_argument("--format", choices=("clf", "csv"), default="clf")
    p.add_argument("--float-width", type=int, choices=(4, 8), default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run strategies over one size schedule")
    _add_common(p)
    p.add_argument("--strategy", default="lwf",
                   help=f"comma-separated subset of {', '.join(KINDS)}")
    p.add_argument("--schedule", default="zipf-small",
                   help="fixed:<s> | zipf-small | zipf-large")
    p.add_argument("--no-joint", action="store_true",
                   help="skip the per-seed joint reference run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="LwF sweep over chunk sizes x lambda")
    _add_common(p)
    p.add_argument("--sizes", default=None, help="comma-separated chunk sizes (default 50..500)")
    p.add_argument("--keep-runs", action="store_true", help="also write per-run rows")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="aggregate a runs.csv into summaries and BRoT")
    p.add_argument("--runs", required=True)
    p.add_argument("--profile", choices=("mad", "cls"), default="mad")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        info = args.func(args)
    except (IncremadError, OSError) as exc:
        return _fail(exc)
    print(json.dumps({"status": "ok", "command": args.command, **info}, sort_keys=True,
                     default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
