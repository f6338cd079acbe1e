"""Command-line entry point: ``ntk-forgetting {gen,run,analyze,spectrum,compare,metrics}``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .learners import METHODS, Hyper
from .metrics import EvalMatrix, average_accuracy, forgetting_measure
from .model import make_feature_map
from .tasks import CsvFormatError, load_csv, write_csv


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Apply the shared command-line flags on top of a config."""
    hyper = cfg.hyper
    changes = {}
    if getattr(args, "lam", None) is not None:
        changes["lam"] = args.lam
    if getattr(args, "lr", None) is not None:
        changes["lr"] = args.lr
    if getattr(args, "components", None) is not None:
        changes["mem_per_task"] = args.components
    if getattr(args, "pca_samples", None) is not None:
        changes["pca_samples"] = args.pca_samples
    top = {"hyper": dataclasses.replace(hyper, **changes)}
    if getattr(args, "method", None):
        top["methods"] = (args.method,)
    if getattr(args, "seed", None) is not None:
        top["seeds"] = (args.seed,)
    if getattr(args, "memory", None):
        top["memory_sizes"] = _int_list(args.memory)
    if getattr(args, "iterative_check", False):
        top["iterative_check"] = True
    if getattr(args, "normalize_drift", False):
        top["normalize_drift"] = True
    if getattr(args, "out", None):
        top["out_dir"] = args.out
    return dataclasses.replace(cfg, **top)


def _hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, help="weight-decay regulariser (> 0)")
    p.add_argument("--lr", type=float, help="fixed learning rate for the iterative path")
    p.add_argument("--components", type=int, help="memory directions stored per task (d)")
    p.add_argument("--pca-samples", type=int, help="rows sampled for the PCA memory (s)")


def cmd_gen(args) -> int:
    cfg = _override(load_config(args.config), args)
    seq = harness.make_sequence(cfg, cfg.seeds[0])
    out = Path(args.out or f"sequence_seed{cfg.seeds[0]}.csv")
    write_csv(seq, out)
    print(f"wrote {len(seq)} tasks to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _override(load_config(args.config), args)
    result = harness.run_experiment(cfg)
    failed = [r for r in result["records"] if not r.ok]
    for r in failed:
        print(f"cell {r.method}/seed{r.seed} failed: {r.error}", file=sys.stderr)
    print(f"config {cfg.config_hash}: {len(result['records']) - len(failed)} cells ok, "
          f"{len(failed)} failed; reports in {Path(cfg.out_dir)}")
    return 1 if failed else 0


def cmd_analyze(args) -> int:
    seq = load_csv(args.sequence)
    optima, schedule, pca_full = harness.load_trajectory(args.trajectory)
    if args.config:
        cfg = load_config(args.config)
        fmap = cfg.make_feature_map(seq.input_dim)
        lam = cfg.hyper.lam if args.lam is None else args.lam
        d = cfg.hyper.mem_per_task if args.components is None else args.components
    else:
        fmap = make_feature_map("identity", seq.input_dim)
        lam = Hyper().lam if args.lam is None else args.lam
        d = 0 if args.components is None else args.components
    recs = harness.analyze_trajectory(args.method, fmap, seq, optima, schedule, lam, d, pca_full,
                                      args.pairs, args.normalize_drift)
    header = ["method", "source", "target", "cf", "cf_closed_form", "bound", "bound_sum_of_squares",
              "top_overlap"]
    rows = [(args.method, r.source, r.target, r.cf, r.cf_closed_form, r.bound, r.bound_sum_of_squares,
             r.top_overlap) for r in recs]
    if args.out:
        harness._write(Path(args.out), header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([[harness._fmt(v) for v in row] for row in rows])
    return 0


def cmd_spectrum(args) -> int:
    if args.sequence:
        seq = load_csv(args.sequence)
        fmap = make_feature_map("identity", seq.input_dim)
        hyper = Hyper()
        seed = args.seed or 0
        methods = ["ogd", "pca_ogd"]
    else:
        cfg = _override(load_config(args.config), args)
        seed = cfg.seeds[0]
        seq = harness.make_sequence(cfg, seed)
        fmap = cfg.make_feature_map(seq.input_dim)
        hyper = cfg.hyper
        methods = [m for m in cfg.methods if m != "a_gem"]
    overrides = {k: v for k, v in (("lam", args.lam), ("lr", args.lr), ("mem_per_task", args.components),
                                   ("pca_samples", args.pca_samples)) if v is not None}
    hyper = dataclasses.replace(hyper, **overrides)
    sizes = _int_list(args.memory) if args.memory else (0, 1, 2, 4)
    if args.method:
        methods = [args.method]
    rows = []
    for m in methods:
        rows += harness.spectrum_rows(m, seq, sizes, fmap, hyper, seed)
    header = ["method", "seed", "memory", "index", "singular_value"]
    out = Path(args.out or "spectrum.csv")
    harness._write(out, header, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for d in args.runs:
        path = Path(d) / "drift.csv" if Path(d).is_dir() else Path(d)
        rows += harness.read_csv_rows(path)
    table = harness.compare_report(rows)
    out = harness.write_compare(table, args.out or "compare.csv")
    msg = f"wrote {len(table)} rows to {out}"
    try:
        msg += f"; spearman(max overlap, drop) = {harness.eigen_drop_correlation(table):.4f}"
    except ValueError:
        pass
    print(msg)
    return 0


def _eval_from_runs(rows, method, seed) -> EvalMatrix:
    sel = [r for r in rows if (method is None or r["method"] == method) and (seed is None or int(r["seed"]) == seed)]
    cells = {(r["method"], r["seed"]) for r in sel}
    if len(cells) != 1:
        raise ValueError(f"runs file holds {len(cells)} matching (method, seed) cells; pick one with --method/--seed")
    T = max(int(r["after_task"]) for r in sel)
    vals = np.full((T, T), np.nan)
    for r in sel:
        vals[int(r["after_task"]) - 1, int(r["task"]) - 1] = float(r["value"])
    return EvalMatrix(vals, sel[0]["kind"])


def cmd_metrics(args) -> int:
    with open(args.matrix, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{args.matrix}: empty file")
    if rows[0][:3] == ["config_hash", "method", "seed"]:
        E = _eval_from_runs([dict(zip(rows[0], r)) for r in rows[1:]], args.method, args.seed)
    else:
        body = rows[1:] if any(c and not _is_number(c) for c in rows[0]) else rows
        vals = np.array([[float(c) if c.strip() else np.nan for c in r] for r in body if r])
        E = EvalMatrix(vals, args.kind)
    print(f"average {average_accuracy(E):.12g}")
    if E.T >= 2:
        print(f"forgetting {forgetting_measure(E):.12g}")
    return 0


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ntk-forgetting", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a generated task sequence as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--memory", help="comma-separated memory sizes for spectra")
    p.add_argument("--iterative-check", action="store_true")
    p.add_argument("--normalize-drift", action="store_true")
    _hyper_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="forgetting records from a stored sequence and trajectory")
    p.add_argument("--sequence", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--method", required=True, choices=[m for m in METHODS if m != "a_gem"])
    p.add_argument("--config", help="take the feature map and defaults from this config")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--components", type=int)
    p.add_argument("--pairs", default="all", choices=("all", "first", "consecutive", "last"))
    p.add_argument("--normalize-drift", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("spectrum", help="overlap singular values per memory size")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--sequence")
    p.add_argument("--method", choices=[m for m in METHODS if m != "a_gem"])
    p.add_argument("--seed", type=int)
    p.add_argument("--memory", help="comma-separated memory sizes")
    p.add_argument("--out")
    _hyper_flags(p)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("compare", help="comparison table from run directories")
    p.add_argument("runs", nargs="+", help="run directories or drift.csv files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics", help="average accuracy and forgetting from an evaluation matrix")
    p.add_argument("matrix", help="square matrix CSV (row l = after task l) or a runs.csv")
    p.add_argument("--kind", default="accuracy", choices=("accuracy", "neg_loss"))
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_metrics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CsvFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
