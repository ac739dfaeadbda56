"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pydantic

from .conformal import ConformalCalibrator, NonConformityMeasure, calibrate, normalize_rows
from .data import load_csv, write_csv
from .experiment import PSEUDO_FILE, TEST_FILE, load_config, run_experiment, write_experiment
from .metrics import DEFAULT_DELTAS, ece, validity_report
from .prob import ValidationError
from .trainer import NumericalError, load_checkpoint
from .verify import oracle_check

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _deltas(text: str) -> List[float]:
    try:
        out = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid delta list {text!r}") from None
    if not out or any(not 0 < d < 1 for d in out):
        raise argparse.ArgumentTypeError("deltas must be comma-separated values in (0, 1)")
    return out


def _k_range(text: str) -> List[int]:
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            ks = list(range(lo, hi + 1))
        else:
            ks = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid K range {text!r}; use LO..HI or a comma list") from None
    if not ks or min(ks) < 2:
        raise argparse.ArgumentTypeError("K values must be >= 2")
    return ks


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {v}")
    return v


def _read_matrix(path: Path, prefix: str):
    """Columns named ``<prefix><k>`` of a CSV file, plus the optional ``label`` column."""
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and not r[0].startswith("#")]
    if not rows:
        raise UsageError(f"{path}: no header row")
    header = [c.strip() for c in rows[0][1]]
    cols = [j for j, c in enumerate(header) if c.startswith(prefix) and c[len(prefix):].isdigit()]
    if not cols:
        raise UsageError(f"{path}: no '{prefix}<k>' columns")
    label = header.index("label") if "label" in header else None
    M = np.empty((len(rows) - 1, len(cols)))
    y = np.empty(len(rows) - 1, dtype=np.int64) if label is not None else None
    for r, (line, row) in enumerate(rows[1:]):
        if len(row) != len(header):
            raise UsageError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
        try:
            M[r] = [float(row[j]) for j in cols]
            if label is not None:
                y[r] = int(row[label])
        except ValueError:
            raise UsageError(f"{path}: line {line} has a non-numeric value") from None
    return M, y


def _write_report(out_dir: Path, stem: str, report):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(report.to_json())
    header, rows = report.csv_rows()
    write_csv(out_dir / f"{stem}.csv", header, rows)


def cmd_calibrate(args) -> int:
    model = load_checkpoint(args.model)
    data = load_csv(args.data, args.label_column, header=not args.no_header)
    if data.d != model.d:
        raise UsageError(f"data has {data.d} features, model expects {model.d}")
    if int(data.labels.max()) >= model.K:
        raise UsageError(f"data has labels up to {int(data.labels.max())}, model has K={model.K}")
    measure = NonConformityMeasure(args.measure, args.gamma, args.infinite_on_zero)
    cal = calibrate(model.predict(data.features), data.labels, measure)
    Path(args.out).write_text(cal.to_json())
    q = np.quantile(cal.scores, [0.0, 0.25, 0.5, 0.75, 1.0])
    print(f"L={cal.L}")
    print("score quantiles (0, .25, .5, .75, 1): " + " ".join(f"{v:.6g}" for v in q))
    return EXIT_OK


def cmd_predict_sets(args) -> int:
    if not 0 < args.delta < 1:
        raise UsageError(f"--delta must lie in (0, 1), got {args.delta}")
    cal = ConformalCalibrator.from_json(Path(args.calibrator).read_text())
    probs, _ = _read_matrix(Path(args.predictions), args.prefix)
    if probs.shape[1] != cal.K:
        raise UsageError(f"{args.predictions}: {probs.shape[1]} probability columns, calibrator has K={cal.K}")
    raw, scores = cal.p_value_matrix(probs, return_scores=True)
    pis = normalize_rows(raw, args.normalization, scores)
    member = raw >= args.delta
    K = cal.K
    header = [f"p_{k}" for k in range(K)] + [f"pi_{k}" for k in range(K)] + [f"in_{k}" for k in range(K)]
    rows = [list(a) + list(b) + [int(m) for m in c] for a, b, c in zip(raw, pis, member)]
    write_csv(args.out, header, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg = cfg.model_copy(update={"output_dir": args.output_dir})
    out_dir = Path(cfg.output_dir)
    result = run_experiment(cfg)
    path = write_experiment(cfg, result, out_dir, overwrite=args.overwrite)
    rec = result.record
    print(f"run written to {path}")
    if rec.final_accuracy is not None:
        print(f"test accuracy {rec.final_accuracy:.4f}  ECE {rec.final_ece:.4f}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    report = oracle_check(args.k_range, args.instances, args.tolerance, args.seed, args.threads)
    print(f"{'K':>3} {'max|dloss|':>12} {'exact-oracle':>13} {'viol exact':>11} {'viol oracle':>12} "
          f"{'unconv':>6} {'capped':>6} {'sec':>7}")
    for r in report.per_k:
        print(f"{r.K:>3} {r.max_abs_loss_diff:>12.3e} {r.max_exact_minus_oracle:>13.3e} {r.max_violation_exact:>11.3e} "
              f"{r.max_violation_oracle:>12.3e} {r.oracle_unconverged:>6} {r.capped:>6} {r.seconds:>7.2f}")
    print(f"max |dloss| {report.max_abs_loss_diff:.3e}  max constraint violation {report.max_violation:.3e}")
    print("exact projection time (us):")
    edges = report.timing_edges_us
    labels = [f"<{edges[0]:g}"] + [f"{a:g}-{b:g}" for a, b in zip(edges, edges[1:])] + [f">={edges[-1]:g}"]
    for lab, c in zip(labels, report.timing_counts):
        print(f"  {lab:>10} {c}")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    print("PASS" if report.passed else f"FAIL: tolerance {args.tolerance:g} exceeded")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_validity(args) -> int:
    preds = pred_labels = None
    if args.run:
        run_dir = Path(args.run).parent
        doc = json.loads(Path(args.run).read_text())
        if "run-schema" not in doc:
            raise UsageError(f"{args.run}: not a run file")
        pseudo = run_dir / PSEUDO_FILE
        if not pseudo.exists():
            raise UsageError(f"{pseudo}: missing; the run has no unlabeled pool to evaluate")
        pis, labels = _read_matrix(pseudo, "p_" if args.raw else "pi_")
        if (run_dir / TEST_FILE).exists():
            preds, pred_labels = _read_matrix(run_dir / TEST_FILE, "prob_")
    else:
        pis, labels = _read_matrix(Path(args.pis), args.prefix)
        if args.labels:
            lab = load_csv(args.labels, args.label_column, feature_columns=[], K=pis.shape[1])
            labels = lab.labels
        if args.predictions:
            preds, pred_labels = _read_matrix(Path(args.predictions), "prob_")
    if labels is None:
        raise UsageError("no true labels: the possibility file has no 'label' column and --labels was not given")
    if len(labels) != len(pis):
        raise UsageError(f"{len(pis)} possibility rows but {len(labels)} labels")
    out_dir = Path(args.out_dir)
    report = validity_report(pis, labels, args.deltas, raw=args.raw)
    _write_report(out_dir, "validity", report)
    for d, r in zip(report.deltas, report.error_rates):
        print(f"delta={d:g} error_rate={r:.4f}")
    if preds is not None:
        if pred_labels is None:
            raise UsageError("prediction file has no 'label' column")
        e = ece(preds, pred_labels, args.bins)
        _write_report(out_dir, "ece", e)
        print(f"ECE ({e.bins} bins) {e.ece:.4f}")
    return EXIT_OK


def build_parser() -> ArgumentParser:
    p = ArgumentParser(prog="ccssl", description="Conformal credal self-training toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    c = sub.add_parser("calibrate", help="score a labeled CSV with a model checkpoint and write a calibrator")
    c.add_argument("--data", required=True, help="CSV with features and a label column")
    c.add_argument("--model", required=True, help="model checkpoint JSON")
    c.add_argument("--out", required=True, help="calibrator JSON to write")
    c.add_argument("--measure", choices=["diff", "prop"], default="diff")
    c.add_argument("--gamma", type=float, default=0.0, help="offset of the prop measure")
    c.add_argument("--infinite-on-zero", action="store_true",
                   help="score zero-probability classes as +inf under prop with gamma=0")
    c.add_argument("--label-column", default="label")
    c.add_argument("--no-header", action="store_true", help="CSV has no header; columns are addressed by index")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("predict-sets", help="p-values, possibilities and prediction sets for predictions")
    s.add_argument("--calibrator", required=True)
    s.add_argument("--predictions", required=True, help="CSV with columns prob_0..prob_{K-1}")
    s.add_argument("--prefix", default="prob_", help="column prefix of the probabilities")
    s.add_argument("--delta", type=float, required=True, help="significance level in (0, 1)")
    s.add_argument("--normalization", choices=["max-ratio", "argmax-one"], default="max-ratio")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict_sets)

    t = sub.add_parser("train", help="run an experiment from a JSON config or a persisted run")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", help="override the config's output_dir")
    t.add_argument("--overwrite", action="store_true", help="replace an existing run")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle-check", help="fuzz the exact projection against the Frank-Wolfe oracle")
    o.add_argument("--k-range", type=_k_range, default=list(range(2, 9)), help="LO..HI or comma list (default 2..8)")
    o.add_argument("--instances", type=_positive_int, default=10_000, help="instances per K (default 10000)")
    o.add_argument("--tolerance", type=float, default=1e-4)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--threads", type=_positive_int, default=1, help="worker threads for the oracle")
    o.add_argument("--out", help="also write the report as JSON")
    o.set_defaults(func=cmd_oracle_check)

    v = sub.add_parser("validity", help="validity and ECE reports")
    src = v.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="run.json written by 'train'")
    src.add_argument("--pis", help="CSV of possibility (or p-value) columns, optionally with 'label'")
    v.add_argument("--prefix", default="pi_", help="column prefix in --pis")
    v.add_argument("--labels", help="CSV holding the true labels for --pis")
    v.add_argument("--label-column", default="label")
    v.add_argument("--predictions", help="CSV with prob_* and label columns for ECE")
    v.add_argument("--raw", action="store_true", help="evaluate raw p-values instead of normalized possibilities")
    v.add_argument("--deltas", type=_deltas, default=list(DEFAULT_DELTAS), help="comma-separated (default 0.05,0.1,0.25)")
    v.add_argument("--bins", type=_positive_int, default=15)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_validity)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except pydantic.ValidationError as exc:
        print(f"invalid configuration ({exc.error_count()} errors):", file=sys.stderr)
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            print(f"  {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValidationError, FileExistsError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
