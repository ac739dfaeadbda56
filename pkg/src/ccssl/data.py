"""Synthetic datasets, CSV ingestion, splits, and run persistence."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .prob import ValidationError

RUN_SCHEMA = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    K: int
    name: Optional[str] = None
    label_names: Optional[tuple] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise ValidationError(f"inconsistent shapes: features {X.shape}, labels {y.shape}")
        if self.K < 2:
            raise ValidationError(f"K must be >= 2, got {self.K}")
        if y.size and (y.min() < 0 or y.max() >= self.K):
            raise ValidationError(f"labels must lie in [0, {self.K})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """Labeled-train, calibration, unlabeled and test partitions.

    ``shadow_labels`` holds the true labels of the unlabeled pool.  Training
    never reads it; only evaluation of pseudo-label validity does.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    calib_x: np.ndarray
    calib_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    K: int
    shadow_labels: Optional[np.ndarray] = None
    indices: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.labeled_x.shape[1]


class GeneratorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["gaussian-blobs", "interleaved-arcs"] = "gaussian-blobs"
    K: int = Field(2, ge=2)
    d: int = Field(2, ge=1)
    n: int = Field(100, ge=1)
    separation: float = Field(3.0, ge=0)
    noise: float = Field(1.0, ge=0)
    priors: Optional[List[float]] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        errors = []
        if self.n < self.K:
            errors.append(f"n={self.n} must be >= K={self.K}")
        if self.priors is not None:
            if len(self.priors) != self.K:
                errors.append(f"priors has {len(self.priors)} entries, expected K={self.K}")
            elif any(p < 0 for p in self.priors) or abs(sum(self.priors) - 1.0) > 1e-9:
                errors.append("priors must be non-negative and sum to 1")
        if self.kind == "interleaved-arcs" and (self.K != 2 or self.d != 2):
            errors.append("interleaved-arcs requires K=2 and d=2")
        if errors:
            raise ValueError("; ".join(errors))
        return self


def class_means(K: int, d: int, separation: float) -> np.ndarray:
    """Means at pairwise distance ``separation``: simplex vertices if ``K <= d``, else a circle."""
    means = np.zeros((K, d))
    if K <= d:
        means[np.arange(K), np.arange(K)] = separation / math.sqrt(2.0)
    else:
        if d < 2:
            raise ValidationError(f"cannot place {K} class means in d={d}")
        radius = separation / (2.0 * math.sin(math.pi / K))
        angle = 2.0 * math.pi * np.arange(K) / K
        means[:, 0] = radius * np.cos(angle)
        means[:, 1] = radius * np.sin(angle)
    return means


def generate(spec: GeneratorSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    priors = np.full(spec.K, 1.0 / spec.K) if spec.priors is None else np.asarray(spec.priors)
    counts = rng.multinomial(spec.n, priors)
    y = rng.permutation(np.repeat(np.arange(spec.K), counts))
    if spec.kind == "gaussian-blobs":
        X = class_means(spec.K, spec.d, spec.separation)[y]
        X = X + spec.noise * rng.standard_normal((spec.n, spec.d))
    else:
        t = rng.uniform(0.0, math.pi, spec.n)
        X = np.where(y[:, None] == 0,
                     np.c_[np.cos(t), np.sin(t)],
                     np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)])
        X = spec.separation * X + spec.noise * rng.standard_normal((spec.n, 2))
    return Dataset(X, y, spec.K, name=spec.kind)


def split(data: Dataset, n_labeled: int, calib_fraction: float, n_test: int, seed: int) -> SplitDataset:
    """Carve test, labeled (train + calibration) and unlabeled partitions.

    The test set is drawn first.  The labeled pool is then taken round-robin
    over classes so small pools still see every class; its first part is the
    training set and its last ``floor(calib_fraction * n_labeled)`` members the
    calibration set.
    """
    if not 0 < calib_fraction < 1:
        raise ValidationError(f"calib_fraction must lie in (0, 1), got {calib_fraction}")
    if n_labeled < 0 or n_test < 0 or n_labeled + n_test > data.n:
        raise ValidationError(f"n_labeled={n_labeled} + n_test={n_test} exceeds n={data.n}")
    n_cal = int(math.floor(calib_fraction * n_labeled + 1e-9))
    n_train = n_labeled - n_cal
    if n_cal < 1 or n_train < 1:
        raise ValidationError(
            f"split leaves {n_train} labeled-train and {n_cal} calibration samples; both must be >= 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    test = perm[:n_test]
    rest = perm[n_test:]
    queues = [list(rest[data.labels[rest] == k]) for k in range(data.K)]
    pool = []
    while len(pool) < n_labeled:
        for q in queues:
            if q and len(pool) < n_labeled:
                pool.append(q.pop(0))
    pool = np.asarray(pool, dtype=np.int64)
    train, cal = pool[:n_train], pool[n_train:]
    taken = np.zeros(data.n, dtype=bool)
    taken[pool] = True
    unl = rest[~taken[rest]]
    X, y = data.features, data.labels
    return SplitDataset(X[train], y[train], X[cal], y[cal], X[unl], X[test], y[test], data.K,
                        shadow_labels=y[unl],
                        indices={"train": train, "calibration": cal, "unlabeled": unl, "test": test})


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValidationError(f"line {line}: non-numeric value {text!r} in column {col!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"line {line}: non-finite value {text!r} in column {col!r}")
    return v


def load_csv(path: Union[str, Path], label_column: Union[str, int] = "label",
             feature_columns: Optional[Sequence[Union[str, int]]] = None, header: bool = True,
             K: Optional[int] = None) -> Dataset:
    """Read a dataset from CSV.

    Labels that all parse as non-negative integers are used as class indices;
    otherwise each distinct string gets the next index in order of first
    appearance.  Without a header, columns are addressed by position.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and not r[0].startswith("#")]
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    if header:
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
        lookup = {c: j for j, c in enumerate(names)}
    else:
        names = [str(j) for j in range(len(rows[0][1]))]
        lookup = {j: j for j in range(len(names))}
    width = len(names)
    if not rows:
        raise ValidationError(f"{path}: header but no data rows")

    def col(c):
        if c not in lookup:
            raise ValidationError(f"{path}: missing column {c!r}")
        return lookup[c]

    li = col(label_column)
    fi = [col(c) for c in feature_columns] if feature_columns is not None else \
        [j for j in range(width) if j != li]
    X = np.empty((len(rows), len(fi)))
    raw_labels = []
    for r, (line, row) in enumerate(rows):
        if len(row) != width:
            raise ValidationError(f"{path}: line {line} has {len(row)} fields, expected {width}")
        X[r] = [_parse_float(row[j], line, names[j]) for j in fi]
        raw_labels.append(row[li].strip())
    if all(s.isdigit() for s in raw_labels):
        y = np.array([int(s) for s in raw_labels], dtype=np.int64)
        label_names = None
        k = int(y.max()) + 1 if K is None else K
    else:
        mapping = {}
        for s in raw_labels:
            mapping.setdefault(s, len(mapping))
        y = np.array([mapping[s] for s in raw_labels], dtype=np.int64)
        label_names = tuple(mapping)
        k = len(mapping) if K is None else K
    return Dataset(X, y, max(k, 2), name=path.stem, label_names=label_names)


def write_csv(path: Union[str, Path], header: Sequence[str], rows, schema_version: int = 1):
    """Write rows with a leading ``# schema-version`` comment line."""
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# schema-version={schema_version}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def persist_run(record, cfg, path: Union[str, Path], overwrite: bool = False) -> Path:
    """Write one JSON document holding ``cfg`` and ``record``, plus a CSV trace beside it."""
    path = Path(path)
    trace = path.with_suffix(".trace.csv")
    if not overwrite and (path.exists() or trace.exists()):
        raise FileExistsError(f"{path} already exists and overwrite was not requested")
    cfg_doc = cfg.model_dump(mode="json") if hasattr(cfg, "model_dump") else dict(cfg)
    doc = {"run-schema": RUN_SCHEMA, "config": cfg_doc, "record": record.to_dict()}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=1))
        header, rows = record.trace_rows()
        write_csv(trace, header, rows)
    except OSError as exc:
        raise OSError(f"failed to write run to {path}: {exc}") from exc
    return path


def load_run(path: Union[str, Path]) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("run-schema") != RUN_SCHEMA:
        raise ValidationError(f"{path}: unsupported run-schema {doc.get('run-schema')!r}")
    return doc
