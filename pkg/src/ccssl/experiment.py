"""End-to-end experiments: config, data loading, training, evaluation, persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import GeneratorSpec, SplitDataset, generate, load_csv, persist_run, split, write_csv
from .metrics import DEFAULT_DELTAS, validity_report
from .prob import ValidationError
from .trainer import Classifier, RunRecord, TrainingConfig, build_calibrator, possibility_rows, save_checkpoint, train

RUN_FILE = "run.json"
MODEL_FILE = "model.json"
PSEUDO_FILE = "pseudo_labels.csv"
TEST_FILE = "test_predictions.csv"


class CsvSource(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: str
    label_column: Union[str, int] = "label"
    feature_columns: Optional[List[Union[str, int]]] = None
    header: bool = True


class SplitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_labeled: int = Field(40, ge=2)
    n_test: int = Field(1000, ge=0)
    seed: int = 0


class ExperimentConfig(BaseModel):
    """One self-contained experiment: data source, split, training settings, reporting."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = 1
    training: TrainingConfig = TrainingConfig()
    generator: Optional[GeneratorSpec] = None
    csv: Optional[CsvSource] = None
    split: SplitSpec = SplitSpec()
    deltas: List[float] = Field(default_factory=lambda: list(DEFAULT_DELTAS))
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _check(self):
        errors = []
        if self.schema_version != 1:
            errors.append(f"unsupported schema_version {self.schema_version}")
        if (self.generator is None) == (self.csv is None):
            errors.append("exactly one of 'generator' and 'csv' must be given")
        if not self.deltas or any(not 0 < d < 1 for d in self.deltas):
            errors.append("deltas must be a non-empty list of values in (0, 1)")
        if errors:
            raise ValueError("; ".join(errors))
        return self


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read an experiment config, or the config embedded in a persisted run."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "run-schema" in doc:
        doc = doc["config"]
    return ExperimentConfig.model_validate(doc)


def prepare_data(cfg: ExperimentConfig) -> SplitDataset:
    if cfg.generator is not None:
        ds = generate(cfg.generator)
    else:
        src = cfg.csv
        ds = load_csv(src.path, src.label_column, src.feature_columns, src.header)
    return split(ds, cfg.split.n_labeled, cfg.training.calib_fraction, cfg.split.n_test, cfg.split.seed)


@dataclass
class ExperimentResult:
    model: Classifier
    record: RunRecord
    pseudo_pis: Optional[np.ndarray]
    pseudo_raw: Optional[np.ndarray]
    shadow_labels: Optional[np.ndarray]
    test_probs: np.ndarray
    test_labels: np.ndarray


def evaluate_pseudo_labels(model: Classifier, data: SplitDataset, cfg: TrainingConfig, deltas):
    """Validity of final pseudo-labels on the unlabeled pool against its shadow labels.

    Returns ``(validity dict, normalized pis, raw p-values)``.
    """
    if data.shadow_labels is None:
        raise ValidationError("unlabeled pool has no shadow labels; validity cannot be evaluated")
    cal = build_calibrator(model, data.calib_x, data.calib_y, cfg)
    probs = model.predict(data.unlabeled_x)
    raw = possibility_rows(probs, cal, None)
    pis = possibility_rows(probs, cal, cfg.normalization)
    return {
        "normalized": validity_report(pis, data.shadow_labels, deltas).to_dict(),
        "raw": validity_report(raw, data.shadow_labels, deltas, raw=True).to_dict(),
    }, pis, raw


def run_experiment(cfg: ExperimentConfig, data: Optional[SplitDataset] = None) -> ExperimentResult:
    data = prepare_data(cfg) if data is None else data
    model, record = train(cfg.training, data)
    pis = raw = None
    if len(data.unlabeled_x):
        record.validity, pis, raw = evaluate_pseudo_labels(model, data, cfg.training, cfg.deltas)
    test_probs = model.predict(data.test_x) if len(data.test_y) else np.zeros((0, data.K))
    return ExperimentResult(model, record, pis, raw, data.shadow_labels, test_probs, data.test_y)


def write_experiment(cfg: ExperimentConfig, result: ExperimentResult, out_dir: Union[str, Path],
                     overwrite: bool = False) -> Path:
    out = Path(out_dir)
    run_path = persist_run(result.record, cfg, out / RUN_FILE, overwrite=overwrite)
    save_checkpoint(result.model, out / MODEL_FILE, seed=cfg.training.seed, iteration=cfg.training.iterations)
    K = result.model.K
    if result.pseudo_pis is not None:
        header = [f"pi_{k}" for k in range(K)] + [f"p_{k}" for k in range(K)] + ["label"]
        rows = [list(a) + list(b) + [int(y)] for a, b, y in zip(result.pseudo_pis, result.pseudo_raw,
                                                                 result.shadow_labels)]
        write_csv(out / PSEUDO_FILE, header, rows)
    header = [f"prob_{k}" for k in range(K)] + ["label"]
    write_csv(out / TEST_FILE, header, [list(p) + [int(y)] for p, y in zip(result.test_probs, result.test_labels)])
    return run_path
