"""Scenario orchestration: single runs, order permutations and lambda x size grids."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._backend import NAME as BACKEND
from .data_io import Dataset, load_any
from .errors import ConfigError, FormatError, IncremadError
from .metrics import (
    MetricRecord,
    auc_over_time,
    borda_points,
    classification_record,
    mad_record,
)
from .nn import DEFAULT_HIDDEN, OptimizerState, init_model
from .stream import CHUNK_SIZES, SizeSchedule, build_stream, enumerate_orders
from .strategies import (
    StrategyConfig,
    init_state,
    joint_train,
    predict_proba,
    train_experience,
)

PROFILES = ("mad", "cls")
DEFAULT_LAMBDAS = {
    "mad": (100, 200, 400, 600, 800, 1000, 1200, 1500),
    "cls": (1, 2, 5, 10, 20, 50),
}
RUN_COLUMNS = ("run_id", "strategy", "lambda", "size_mode", "order_perm", "seed",
               "experience_idx", "eer", "bpcer10", "bpcer1", "bpcer01", "accuracy",
               "mad_point")
GRID_METRICS = ("auc_eer", "auc_bpcer10", "auc_bpcer1", "auc_bpcer01", "auc_main",
                "deviation", "brot")


class RunError(IncremadError):
    def __init__(self, message, experience_index=None):
        super().__init__(message)
        self.experience_index = experience_index


def derive_seed(base_seed: int, *key) -> int:
    """Stable 63-bit seed from a base seed and a cell key (independent of scheduling)."""
    digest = hashlib.blake2b(repr((int(base_seed),) + key).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass
class RunConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    schedule: SizeSchedule = field(default_factory=SizeSchedule)
    order: tuple[int, ...] | None = None
    seed: int = 0
    profile: str = "mad"
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    source_paths: tuple[str, ...] = ()
    test_path: str | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.order is not None:
            self.order = tuple(int(j) for j in self.order)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.source_paths = tuple(str(p) for p in self.source_paths)
        if self.test_path is not None:
            self.test_path = str(self.test_path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {"mode": self.schedule.mode, "size": self.schedule.size,
                         "zipf_exponent": self.schedule.zipf_exponent}
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RunResult:
    config: RunConfig
    fingerprint: str
    records: list[MetricRecord]
    auc: float
    auc_n1: float
    dropped: dict[int, int]
    wall_time: float = 0.0

    @property
    def run_id(self) -> str:
        return self.fingerprint[:12]

    def series(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]


def main_metric(profile: str) -> str:
    return "mad_point" if profile == "mad" else "top1_accuracy"


def _load_data(cfg: RunConfig) -> tuple[list[Dataset], Dataset]:
    if not cfg.source_paths or cfg.test_path is None:
        raise ConfigError("no datasets given and the config names no files")
    return [load_any(p) for p in cfg.source_paths], load_any(cfg.test_path)


def _evaluate(index, model, state, cfg: RunConfig, test: Dataset) -> MetricRecord:
    probs = predict_proba(model, state, test.features, cfg.strategy)
    preds = probs.argmax(axis=1)
    if cfg.profile == "mad":
        return mad_record(index, probs[:, 1], test.labels, preds)
    return classification_record(index, preds, test.labels)


def run_scenario(cfg: RunConfig, sources: Sequence[Dataset] | None = None,
                 test_set: Dataset | None = None) -> RunResult:
    """Train through the stream, testing on the fixed test set after every experience."""
    start = time.perf_counter()
    if sources is None or test_set is None:
        sources, test_set = _load_data(cfg)
    if cfg.profile == "mad" and test_set.n_classes != 2:
        raise ConfigError("the mad profile needs a two-class (bona fide / morphed) test set")
    stream = build_stream(sources, cfg.schedule, test_set, cfg.seed, cfg.order)
    widths = [test_set.dim, *cfg.hidden, max(test_set.n_classes,
                                              *(s.n_classes for s in sources))]
    model = init_model(widths, cfg.seed)
    scfg = cfg.strategy
    opt = OptimizerState.for_model(model, scfg.learning_rate, scfg.momentum)
    state = init_state(scfg, model)
    experiences = [stream.union()] if scfg.kind == "joint" else stream.experiences
    records = []
    for exp in experiences:
        try:
            if scfg.kind == "joint":
                joint_train(model, opt, exp, scfg, cfg.seed)
            else:
                train_experience(state, model, opt, exp, scfg, cfg.seed)
            records.append(_evaluate(exp.index, model, state, cfg, test_set))
        except IncremadError as exc:
            raise RunError(f"experience {exp.index}: {type(exc).__name__}: {exc}",
                           exp.index) from exc
    values = [getattr(r, main_metric(cfg.profile)) for r in records]
    return RunResult(cfg, cfg.fingerprint(), records, auc_over_time(values),
                     auc_over_time(values, "n-1"), dict(stream.dropped),
                     time.perf_counter() - start)


def deviation_pct(auc: float, joint_auc: float) -> float:
    """Signed percentage change of an AUC relative to the Joint AUC."""
    return (auc - joint_auc) / joint_auc * 100.0


# grid sweeps -------------------------------------------------------------

@dataclass
class GridResult:
    sizes: list[int]
    lambdas: list[float]
    profile: str
    values: dict[str, np.ndarray]
    counts: np.ndarray
    failures: dict[tuple, str] = field(default_factory=dict)
    runs: list[RunResult] = field(default_factory=list)

    def matrix(self, metric: str) -> np.ndarray:
        return self.values[metric]

    def best_lambda(self, size: int, metric: str = "auc_main") -> float:
        row = self.values[metric][self.sizes.index(size)]
        higher_better = metric == "brot" or (self.profile == "cls"
                                             and metric in ("auc_main", "deviation"))
        pick = np.nanargmax if higher_better else np.nanargmin
        return self.lambdas[int(pick(row))]


_WORKER_DATA: tuple | None = None


def _init_worker(sources, test_set):
    global _WORKER_DATA
    _WORKER_DATA = (sources, test_set)


def _run_task(task):
    key, cfg = task
    sources, test_set = _WORKER_DATA
    try:
        return key, run_scenario(cfg, sources, test_set), None
    except IncremadError as exc:
        return key, None, f"{type(exc).__name__}: {exc}"


def _execute(tasks, sources, test_set, workers: int):
    if workers <= 1:
        _init_worker(sources, test_set)
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(sources, test_set)) as pool:
        return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def run_batch(configs: Sequence[RunConfig], sources: Sequence[Dataset],
              test_set: Dataset, workers: int = 1) -> tuple[list[RunResult], dict[int, str]]:
    """Run independent scenarios, possibly in parallel.

    Returns the successful results in input order and the errors keyed by
    position in ``configs``.
    """
    out = _execute(list(enumerate(configs)), sources, test_set, workers)
    done = {key: res for key, res, err in out if err is None}
    failed = {key: err for key, res, err in out if err is not None}
    return [done[k] for k in sorted(done)], failed


def grid_sweep(sizes: Sequence[int], lambdas: Sequence[float], base_cfg: RunConfig,
               seeds: int | Sequence[int], orders: Sequence[Sequence[int]] | str,
               sources: Sequence[Dataset] | None = None, test_set: Dataset | None = None,
               workers: int = 1, keep_runs: bool = False) -> GridResult:
    """LwF runs for every (size, lambda, order, repetition) cell, aggregated by mean.

    Each cell's seed is derived from ``(base seed, size, order, repetition)``:
    it does not depend on lambda, so the lambdas of one row share their streams
    and initialisations, and it does not depend on worker count or scheduling.
    """
    sizes, lambdas = [int(s) for s in sizes], [float(v) for v in lambdas]
    if not sizes or not lambdas:
        raise ConfigError("grid axes must be non-empty")
    for s in sizes:
        if s not in CHUNK_SIZES:
            raise ConfigError(f"grid size {s} not in {CHUNK_SIZES}")
    if sources is None or test_set is None:
        sources, test_set = _load_data(base_cfg)
    if orders == "all":
        orders = enumerate_orders(len(sources))
    orders = [tuple(o) for o in orders]
    reps = list(range(seeds)) if isinstance(seeds, int) else list(seeds)

    def cfg_for(kind, size, lam, order, rep):
        strategy = base_cfg.strategy.with_(kind=kind, lambda_lwf=lam)
        return RunConfig(strategy, SizeSchedule("fixed", size), order,
                         derive_seed(base_cfg.seed, size, order, rep), base_cfg.profile,
                         base_cfg.hidden, base_cfg.source_paths, base_cfg.test_path)

    tasks = []
    for size in sizes:
        for rep in reps:
            tasks.append((("joint", size, rep), RunConfig(
                base_cfg.strategy.with_(kind="joint"), SizeSchedule("fixed", size), None,
                derive_seed(base_cfg.seed, "joint", size, rep), base_cfg.profile,
                base_cfg.hidden, base_cfg.source_paths, base_cfg.test_path)))
            for order in orders:
                for lam in lambdas:
                    tasks.append((("lwf", size, lam, order, rep),
                                  cfg_for("lwf", size, lam, order, rep)))

    results = {key: (res, err) for key, res, err in _execute(tasks, sources, test_set, workers)}
    return _aggregate(sizes, lambdas, orders, reps, base_cfg.profile, results, keep_runs)


def _aggregate(sizes, lambdas, orders, reps, profile, results, keep_runs) -> GridResult:
    shape = (len(sizes), len(lambdas))
    sums = {m: np.zeros(shape) for m in GRID_METRICS}
    counts = np.zeros(shape, dtype=np.int64)
    failures, runs = {}, []
    lower_better = profile == "mad"
    ranking_field = "bpcer_at_01pct" if profile == "mad" else "top1_accuracy"
    for i, size in enumerate(sizes):
        for rep in reps:
            joint, err = results[("joint", size, rep)]
            if err:
                failures[("joint", size, rep)] = err
                # without the reference no deviation exists for this repetition
                for order in orders:
                    for lam in lambdas:
                        _, lerr = results[("lwf", size, lam, order, rep)]
                        failures[("lwf", size, lam, order, rep)] = lerr or "joint reference failed"
                continue
            for order in orders:
                cell_runs = []
                for j, lam in enumerate(lambdas):
                    res, err = results[("lwf", size, lam, order, rep)]
                    if err:
                        failures[("lwf", size, lam, order, rep)] = err
                    cell_runs.append(res)
                ok = [j for j, r in enumerate(cell_runs) if r is not None]
                if not ok:
                    continue
                if len(ok) > 1 or len(lambdas) == 1:
                    table = np.array([cell_runs[j].series(ranking_field) for j in ok])
                    pts = borda_points(table, lower_is_better=lower_better)
                    brot_vals = pts.sum(axis=1) / (len(ok) * table.shape[1])
                else:
                    brot_vals = np.zeros(1)
                for b, j in zip(brot_vals, ok):
                    r = cell_runs[j]
                    if keep_runs:
                        runs.append(r)
                    sums["auc_eer"][i, j] += auc_over_time(r.series("eer")) if profile == "mad" else math.nan
                    sums["auc_bpcer10"][i, j] += auc_over_time(r.series("bpcer_at_10pct")) if profile == "mad" else math.nan
                    sums["auc_bpcer1"][i, j] += auc_over_time(r.series("bpcer_at_1pct")) if profile == "mad" else math.nan
                    sums["auc_bpcer01"][i, j] += auc_over_time(r.series("bpcer_at_01pct")) if profile == "mad" else math.nan
                    sums["auc_main"][i, j] += r.auc
                    sums["deviation"][i, j] += deviation_pct(r.auc, joint.auc)
                    sums["brot"][i, j] += b
                    counts[i, j] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        values = {m: np.where(counts > 0, s / np.maximum(counts, 1), np.nan)
                  for m, s in sums.items()}
    return GridResult(sizes, lambdas, profile, values, counts, failures, runs)


# output ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_rows(result: RunResult) -> list[dict]:
    cfg = result.config
    order = "-".join(map(str, cfg.order)) if cfg.order is not None else "identity"
    rows = []
    for r in result.records:
        rows.append({
            "run_id": result.run_id,
            "strategy": cfg.strategy.kind,
            "lambda": float(cfg.strategy.lambda_lwf),
            "size_mode": str(cfg.schedule),
            "order_perm": order,
            "seed": cfg.seed,
            "experience_idx": r.experience_index,
            "eer": r.eer,
            "bpcer10": r.bpcer_at_10pct,
            "bpcer1": r.bpcer_at_1pct,
            "bpcer01": r.bpcer_at_01pct,
            "accuracy": r.top1_accuracy,
            "mad_point": r.mad_point,
        })
    return rows


def write_runs_csv(results: Sequence[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RUN_COLUMNS)
        for res in results:
            for row in run_rows(res):
                writer.writerow([_fmt(row[c]) for c in RUN_COLUMNS])


def read_runs_csv(path) -> list[dict]:
    ints = {"seed", "experience_idx"}
    strs = {"run_id", "strategy", "size_mode", "order_perm"}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RUN_COLUMNS:
            raise FormatError(f"{path}: header must be {','.join(RUN_COLUMNS)}")
        for raw in reader:
            try:
                row = {k: v if k in strs else int(v) if k in ints else float(v)
                       for k, v in raw.items()}
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path} line {reader.line_num}: {exc}") from None
            rows.append(row)
    return rows


def write_matrix_csv(matrix: np.ndarray, sizes, lambdas, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["size"] + [_fmt(float(v)) for v in lambdas])
        for size, row in zip(sizes, matrix):
            writer.writerow([size] + [_fmt(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[list[int], list[float], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    lambdas = [float(v) for v in rows[0][1:]]
    sizes = [int(r[0]) for r in rows[1:]]
    return sizes, lambdas, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_manifest(path, configs: dict, seeds, extra: dict | None = None) -> None:
    manifest = {
        "version": __version__,
        "backend": BACKEND,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "configs": configs,
        "seeds": list(seeds),
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")


def emit_results(result, out_dir, configs: dict | None = None, seeds=()) -> list[Path]:
    """Write CSVs (and a manifest) for a list of runs or a grid result."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if isinstance(result, GridResult):
            for metric in GRID_METRICS:
                p = out / f"grid_{metric}.csv"
                write_matrix_csv(result.values[metric], result.sizes, result.lambdas, p)
                written.append(p)
            p = out / "grid_counts.csv"
            write_matrix_csv(result.counts.astype(float), result.sizes, result.lambdas, p)
            written.append(p)
            p = out / "brot.csv"
            write_matrix_csv(result.values["brot"], result.sizes, result.lambdas, p)
            written.append(p)
            if result.runs:
                p = out / "runs.csv"
                write_runs_csv(result.runs, p)
                written.append(p)
            p = out / "failures.csv"
            with open(p, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["cell", "error"])
                for key in sorted(result.failures, key=repr):
                    writer.writerow([repr(key), result.failures[key]])
            written.append(p)
        else:
            runs = list(result) if not isinstance(result, RunResult) else [result]
            p = out / "runs.csv"
            write_runs_csv(runs, p)
            written.append(p)
            p = out / "summary.csv"
            write_summary_csv(runs, p)
            written.append(p)
            if configs is None:
                configs = {r.run_id: r.config.to_dict() for r in runs}
        p = out / "manifest.json"
        write_manifest(p, configs or {}, seeds)
        written.append(p)
    except OSError as exc:
        raise RunError(f"cannot write results to {exc.filename or out}: {exc.strerror}") from exc
    return written


def write_summary_csv(runs: Sequence[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "strategy", "lambda", "size_mode", "order_perm", "seed",
                         "n_experiences", "auc", "auc_n1", "dropped"])
        for r in runs:
            cfg = r.config
            order = "-".join(map(str, cfg.order)) if cfg.order is not None else "identity"
            writer.writerow([r.run_id, cfg.strategy.kind, _fmt(float(cfg.strategy.lambda_lwf)),
                             str(cfg.schedule), order, cfg.seed, len(r.records),
                             _fmt(r.auc), _fmt(r.auc_n1), sum(r.dropped.values())])


def report(rows: list[dict], profile: str = "mad") -> dict:
    """Aggregate per-experience rows into AUC summaries, deviations and BRoT.

    Algorithms are (strategy, lambda) pairs. Deviations are relative to the
    joint runs of the same seed; BRoT compares algorithms that share a size
    mode, order and seed and have the same number of testing experiences.
    """
    field_name = "mad_point" if profile == "mad" else "accuracy"
    rank_field = "bpcer01" if profile == "mad" else "accuracy"
    runs: dict[str, list[dict]] = {}
    for row in rows:
        runs.setdefault(row["run_id"], []).append(row)
    summaries = []
    for run_id, rs in runs.items():
        rs.sort(key=lambda r: r["experience_idx"])
        head = rs[0]
        summaries.append({
            "run_id": run_id, "algorithm": (head["strategy"], head["lambda"]),
            "size_mode": head["size_mode"], "order_perm": head["order_perm"],
            "seed": head["seed"], "auc": auc_over_time([r[field_name] for r in rs]),
            "ranking": [r[rank_field] for r in rs],
        })
    joint = {s["seed"]: s["auc"] for s in summaries if s["algorithm"][0] == "joint"}
    per_alg: dict[tuple, dict[str, list]] = {}
    for s in summaries:
        d = per_alg.setdefault((s["algorithm"], s["size_mode"]), {"auc": [], "dev": []})
        d["auc"].append(s["auc"])
        if s["seed"] in joint and s["algorithm"][0] != "joint":
            d["dev"].append(deviation_pct(s["auc"], joint[s["seed"]]))
    table = []
    for (alg, size_mode), d in sorted(per_alg.items(), key=lambda kv: repr(kv[0])):
        table.append({"strategy": alg[0], "lambda": alg[1], "size_mode": size_mode,
                      "n_runs": len(d["auc"]), "mean_auc": float(np.mean(d["auc"])),
                      "mean_deviation_pct": float(np.mean(d["dev"])) if d["dev"] else math.nan})

    brot_sum: dict[tuple, list[float]] = {}
    groups: dict[tuple, list[dict]] = {}
    for s in summaries:
        if s["algorithm"][0] == "joint":
            continue
        key = (s["size_mode"], s["order_perm"], s["seed"], len(s["ranking"]))
        groups.setdefault(key, []).append(s)
    for members in groups.values():
        members.sort(key=lambda s: repr(s["algorithm"]))
        if len(members) < 2:
            continue
        pts = borda_points(np.array([m["ranking"] for m in members]),
                           lower_is_better=profile == "mad")
        for m, p in zip(members, pts):
            brot_sum.setdefault(m["algorithm"], []).append(p.sum() / (pts.shape[0] * pts.shape[1]))
    brot_table = [{"strategy": a[0], "lambda": a[1], "n_groups": len(v), "brot": float(np.mean(v))}
                  for a, v in sorted(brot_sum.items(), key=lambda kv: repr(kv[0]))]
    return {"summary": table, "brot": brot_table}
