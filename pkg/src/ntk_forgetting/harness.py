"""Run (method x seed) grids and write the CSV reports.

Each cell is computed independently and returned in memory; a single writer
then merges the cells in (method, seed) order, so the files do not depend on
scheduling.  Only ``cells.csv`` carries wall-clock times.
"""
from __future__ import annotations

import csv
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .config import ExperimentConfig
from .forgetting import ForgettingAnalysis, drift, spectrum_report
from .learners import Hyper, MemoryBasis, default_path, train_sequence, with_hyper
from .metrics import EvalMatrix, average_accuracy, eval_matrix, forgetting_measure
from .model import FeatureMap, Weights
from .spectral import OrthonormalBasis
from .tasks import TaskSequence, generate, write_csv

NAN = float("nan")

RUNS_HEADER = ["config_hash", "method", "seed", "after_task", "task", "kind", "value"]
DRIFT_HEADER = ["config_hash", "method", "seed", "source", "target", "cf", "cf_closed_form", "bound",
                "bound_sum_of_squares", "top_overlap", "drop", "cf_iterative"]
SPECTRUM_HEADER = ["config_hash", "method", "seed", "memory", "index", "singular_value"]
CELLS_HEADER = ["config_hash", "method", "seed", "status", "error", "average", "forgetting",
                "iterative_rel_error", "warnings", "wall_time_s"]
COMPARE_HEADER = ["config_hash", "method", "seed", "source", "target", "cf", "cf_closed_form", "bound",
                  "max_overlap_eigenvalue", "drop"]


@dataclass
class RunRecord:
    config_hash: str
    method: str
    seed: int
    eval_kind: str = "neg_loss"
    evals: np.ndarray | None = None
    drift_rows: list = field(default_factory=list)
    spectrum_rows: list = field(default_factory=list)
    iterative_rel_error: float = NAN
    warnings: tuple = ()
    error: str = ""
    wall_time: float = 0.0
    optima: list = field(default_factory=list, repr=False)
    memory_schedule: list = field(default_factory=list, repr=False)
    pca_used_all_rows: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return not self.error


def task_pairs(T: int, mode: str) -> list[tuple[int, int]]:
    if mode == "all":
        return [(s, t) for s in range(1, T + 1) for t in range(s + 1, T + 1)]
    if mode == "first":
        return [(1, t) for t in range(2, T + 1)]
    if mode == "consecutive":
        return [(s, s + 1) for s in range(1, T)]
    if mode == "last":
        return [(1, T)] if T > 1 else []
    raise ValueError(f"unknown pair mode {mode!r}")


def make_sequence(cfg: ExperimentConfig, seed: int) -> TaskSequence:
    return generate(cfg.generator, seed=int(seed), **cfg.generator_params)


def _metric_kind(cfg: ExperimentConfig, seq: TaskSequence) -> str:
    if cfg.metric_kind != "auto":
        return cfg.metric_kind
    return "accuracy" if seq.n_outputs >= 2 else "neg_loss"


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def run_cell(cfg: ExperimentConfig, method: str, seed: int) -> RunRecord:
    """Train and analyse one (method, seed) cell; failures are captured, not raised."""
    rec = RunRecord(cfg.config_hash, method, int(seed))
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            _fill_cell(cfg, rec)
        except Exception as exc:  # isolate the cell
            rec.error = f"{type(exc).__name__}: {exc}"
    rec.warnings = tuple(dict.fromkeys(f"{w.category.__name__}: {w.message}" for w in caught))
    rec.wall_time = time.perf_counter() - start
    return rec


def _fill_cell(cfg: ExperimentConfig, rec: RunRecord) -> None:
    method, seed = rec.method, rec.seed
    seq = make_sequence(cfg, seed)
    fmap = cfg.make_feature_map(seq.input_dim)
    hyper = cfg.hyper_for(seed)
    state = train_sequence(seq, method, fmap, hyper, path=default_path(method))
    rec.optima = [w.values for w in state.per_task_optima]
    rec.memory_schedule = list(state.memory_schedule)
    rec.pca_used_all_rows = dict(state.pca_used_all_rows)

    kind = _metric_kind(cfg, seq)
    rec.eval_kind = kind
    E = eval_matrix(fmap, state.per_task_optima, seq, kind)
    rec.evals = E.values

    iter_optima = None
    if cfg.iterative_check and method != "a_gem":
        it = train_sequence(seq, method, fmap, hyper, path="iterative")
        iter_optima = it.per_task_optima
        rec.iterative_rel_error = max(_rel(a.values, b.values)
                                      for a, b in zip(it.per_task_optima[1:], state.per_task_optima[1:]))

    analysis = None
    if method != "a_gem" and (cfg.cf or cfg.bounds):
        analysis = ForgettingAnalysis.from_state(state, seq, normalize=cfg.normalize_drift)
    for s, t in task_pairs(len(seq), cfg.pairs):
        d = drift(fmap, state.per_task_optima[s], state.per_task_optima[t], seq[s])
        scale = 1.0 / seq[s].n if cfg.normalize_drift else 1.0
        cf = float(d @ d) * scale
        closed = bound = sos = top = NAN
        if analysis is not None:
            if cfg.cf:
                closed = analysis.cf_closed_form(s, t).value
            if cfg.bounds:
                b = analysis.cf_bound(s, t)
                bound, sos = b.value, b.sum_of_squares
            sv = analysis.overlap_matrix(s, t)[1]
            top = float(sv[0]) if len(sv) else 0.0
        cf_it = NAN
        if iter_optima is not None:
            di = drift(fmap, iter_optima[s], iter_optima[t], seq[s])
            cf_it = float(di @ di) * scale
        drop = float(E.values[s - 1, s - 1] - E.values[t - 1, s - 1])
        rec.drift_rows.append((s, t, cf, closed, bound, sos, top, drop, cf_it))

    if cfg.spectra and method != "a_gem" and len(seq) >= 2:
        rec.spectrum_rows = [(m, i, v) for _, m, i, v in
                             spectrum_report(method, seq, cfg.memory_sizes, fmap, hyper, 1, 2)]


def run_cells(cfg: ExperimentConfig) -> list[RunRecord]:
    jobs = [(m, s) for m in cfg.methods for s in cfg.seeds]
    if cfg.workers == 1:
        return [run_cell(cfg, m, s) for m, s in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(run_cell, cfg, m, s) for m, s in jobs]
        return [f.result() for f in futures]


# --- writing ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _write(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"{path}: cannot write ({exc.strerror})") from exc


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run every cell and write runs.csv, drift.csv, spectrum.csv and cells.csv.

    Returns the written paths keyed by report name, plus the records.
    """
    out = Path(out_dir or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create output directory ({exc.strerror})") from exc
    records = run_cells(cfg)
    h = cfg.config_hash

    runs, drifts, spectra, cells = [], [], [], []
    for r in records:
        if r.ok:
            T = r.evals.shape[0]
            runs += [(h, r.method, r.seed, l, t, r.eval_kind, r.evals[l - 1, t - 1])
                     for l in range(1, T + 1) for t in range(1, l + 1)]
            drifts += [(h, r.method, r.seed, *row) for row in r.drift_rows]
            spectra += [(h, r.method, r.seed, *row) for row in r.spectrum_rows]
        avg = forg = NAN
        if r.ok and cfg.metrics:
            E = EvalMatrix(r.evals, r.eval_kind)
            avg = average_accuracy(E)
            forg = forgetting_measure(E) if E.T >= 2 else NAN
        cells.append((h, r.method, r.seed, "ok" if r.ok else "failed", r.error, avg, forg,
                      r.iterative_rel_error, " | ".join(r.warnings), f"{r.wall_time:.3f}"))

    paths = {name: out / f"{name}.csv" for name in ("runs", "drift", "spectrum", "cells")}
    _write(paths["runs"], RUNS_HEADER, runs)
    _write(paths["drift"], DRIFT_HEADER, drifts)
    _write(paths["spectrum"], SPECTRUM_HEADER, spectra)
    _write(paths["cells"], CELLS_HEADER, cells)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")

    if cfg.save_trajectories:
        (out / "sequences").mkdir(exist_ok=True)
        (out / "trajectories").mkdir(exist_ok=True)
        for seed in cfg.seeds:
            write_csv(make_sequence(cfg, seed), out / "sequences" / f"seed{seed}.csv")
        for r in records:
            if r.ok:
                save_trajectory(out / "trajectories" / f"{r.method}_seed{r.seed}.csv", r.optima,
                                r.memory_schedule, r.pca_used_all_rows)
    return {"paths": paths, "records": records}


# --- trajectories -------------------------------------------------------------

def save_trajectory(path, optima, memory_schedule, pca_used_all_rows=None) -> None:
    """Write per-task optima and memory bases as ``kind,task,index,label_task,label_index,v0..``.

    ``optimum`` rows hold one output column of w*_task (task 0 is the origin);
    ``memory`` rows hold the basis in force while ``task`` was trained;
    ``pca_full`` rows flag tasks whose PCA saw every row.
    """
    optima = [np.asarray(getattr(w, "values", w)) for w in optima]
    p = optima[0].shape[0]
    rows = []
    for k, W in enumerate(optima):
        rows += [("optimum", k, j, -1, -1, *W[:, j]) for j in range(W.shape[1])]
    for k, mem in enumerate(memory_schedule, start=1):
        basis = getattr(mem, "basis", mem)
        labels = basis.labels or [(-1, -1)] * basis.size
        for i in range(basis.size):
            lt, li = labels[i] if isinstance(labels[i], tuple) else (-1, -1)
            rows.append(("memory", k, i, lt, li, *basis.vectors[:, i]))
    for k, full in sorted((pca_used_all_rows or {}).items()):
        if full:
            rows.append(("pca_full", k, 0, -1, -1, *np.zeros(p)))
    _write(Path(path), ["kind", "task", "index", "label_task", "label_index"] + [f"v{j}" for j in range(p)], rows)


def load_trajectory(path) -> tuple[list, list, dict]:
    """Inverse of :func:`save_trajectory`: (optima, memory_schedule, pca_used_all_rows)."""
    path = Path(path)
    opt: dict[int, dict[int, np.ndarray]] = {}
    mem: dict[int, list] = {}
    pca_full = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:5] != ["kind", "task", "index", "label_task", "label_index"]:
            raise ValueError(f"{path}: not a trajectory file")
        p = len(header) - 5
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                kind, k, i, lt, li = row[0], int(row[1]), int(row[2]), int(row[3]), int(row[4])
                v = np.array([float(x) for x in row[5:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed numeric cell") from None
            if kind == "optimum":
                opt.setdefault(k, {})[i] = v
            elif kind == "memory":
                mem.setdefault(k, []).append((i, (lt, li), v))
            elif kind == "pca_full":
                pca_full[k] = True
            else:
                raise ValueError(f"{path}:{lineno}: unknown row kind {kind!r}")
    if sorted(opt) != list(range(len(opt))) or not opt:
        raise ValueError(f"{path}: optima must cover tasks 0..T contiguously")
    optima = [Weights(np.column_stack([cols[j] for j in sorted(cols)])) for _, cols in sorted(opt.items())]
    schedule = []
    for k in range(1, len(optima)):
        entries = sorted(mem.get(k, []), key=lambda e: e[0])
        if entries:
            V = np.column_stack([e[2] for e in entries])
            schedule.append(MemoryBasis(OrthonormalBasis(V, tuple(e[1] for e in entries))))
        else:
            schedule.append(MemoryBasis.empty(p))
    return optima, schedule, pca_full


def analyze_trajectory(method: str, fmap: FeatureMap, seq: TaskSequence, optima, schedule, lam: float,
                       components: int = 0, pca_used_all_rows=None, pairs: str = "all",
                       normalize: bool = False) -> list:
    """DriftRecords for every requested pair of a stored trajectory."""
    fa = ForgettingAnalysis(method, fmap, seq, lam, schedule, optima, components, pca_used_all_rows, normalize)
    return [fa.drift_record(s, t) for s, t in task_pairs(fa.n_tasks, pairs)]


# --- reports --------------------------------------------------------------------

def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def compare_report(drift_rows: list[dict]) -> list[tuple]:
    """One comparison row per (method, seed, source, target) from drift.csv rows.

    All rows must come from the same configuration.
    """
    hashes = {r["config_hash"] for r in drift_rows}
    if len(hashes) > 1:
        raise ValueError(f"records come from {len(hashes)} different configurations: {sorted(hashes)}")
    out = []
    for r in drift_rows:
        out.append((r["config_hash"], r["method"], int(r["seed"]), int(r["source"]), int(r["target"]),
                    float(r["cf"]), float(r["cf_closed_form"]), float(r["bound"]), float(r["top_overlap"]),
                    float(r["drop"])))
    out.sort(key=lambda row: row[1:5])
    return out


def write_compare(rows, path) -> Path:
    path = Path(path)
    _write(path, COMPARE_HEADER, rows)
    return path


def eigen_drop_correlation(rows) -> float:
    """Spearman correlation between the top overlap value and the performance drop."""
    x = [r[8] for r in rows if not math.isnan(r[8])]
    y = [r[9] for r in rows if not math.isnan(r[8])]
    if len(x) < 3:
        raise ValueError("need at least three comparison rows")
    return float(spearmanr(x, y).statistic)


def spectrum_rows(method: str, seq: TaskSequence, memory_sizes, fmap: FeatureMap | None = None,
                  hyper: Hyper | None = None, seed: int = 0) -> list[tuple]:
    hyper = with_hyper(hyper or Hyper(), seed=seed)
    return [(method, seed, m, i, v) for _, m, i, v in spectrum_report(method, seq, memory_sizes, fmap, hyper)]
