"""Desk-scale softmax classifiers and the conformal credal self-training loop.

Each iteration draws a labeled batch of size ``B`` and an unlabeled batch of
size ``mu * B``.  Labeled samples contribute cross-entropy against their
label.  Unlabeled samples get a possibility distribution from the conformal
calibrator (computed on one augmented view and treated as a constant target)
and contribute the credal loss of the other view's prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .conformal import ConformalCalibrator, NonConformityMeasure, calibrate, normalize_rows
from .credal_loss import project_rows, softmax
from .data import SplitDataset
from .metrics import accuracy, ece, efficiency_profile
from .prob import ProbDist, ValidationError

CHECKPOINT_SCHEMA = 1


class NumericalError(RuntimeError):
    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(32, ge=1)
    mu: int = Field(7, ge=1)
    lambda_u: float = Field(1.0, ge=0)
    lr: float = Field(0.03, gt=0)
    iterations: int = Field(1000, ge=1)
    measure: Literal["diff", "prop"] = "diff"
    gamma: float = Field(0.1, ge=0)
    infinite_on_zero: bool = False
    normalization: Literal["max-ratio", "argmax-one"] = "max-ratio"
    calib_fraction: float = Field(0.25, gt=0, lt=1)
    # None: rebuild once per pass over the unlabeled pool
    recalibration_period: Optional[int] = Field(None, ge=1)
    mode: Literal["credal", "hard-threshold", "none"] = "credal"
    tau: float = Field(0.95, gt=0, le=1)
    seed: int = 0
    augmentation: Literal["identity", "gaussian-noise"] = "identity"
    sigma_weak: float = Field(0.0, ge=0)
    sigma_strong: float = Field(0.0, ge=0)
    architecture: Literal["linear-softmax", "one-hidden-layer"] = "linear-softmax"
    hidden: int = Field(32, ge=1)
    activation: Literal["tanh", "relu"] = "tanh"
    eval_period: int = Field(100, ge=1)
    pseudo_label_view: Literal["weak", "strong"] = "weak"
    calibration_view: Literal["weak", "strong"] = "weak"

    @property
    def nonconformity(self) -> NonConformityMeasure:
        return NonConformityMeasure(self.measure, self.gamma, self.infinite_on_zero)

    @property
    def augmentation_policy(self) -> "AugmentationPolicy":
        return AugmentationPolicy(self.augmentation, self.sigma_weak, self.sigma_strong)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class Classifier:
    """Linear or one-hidden-layer network with a softmax head."""

    architecture: str
    d: int
    K: int
    params: Dict[str, np.ndarray]
    activation: str = "tanh"

    def logits(self, X: np.ndarray) -> np.ndarray:
        out, _ = self._forward(X)
        return out

    def _forward(self, X):
        p = self.params
        if self.architecture == "linear-softmax":
            return X @ p["W"] + p["b"], None
        pre = X @ p["W1"] + p["b1"]
        h = np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)
        return h @ p["W2"] + p["b2"], (pre, h)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(np.asarray(X, dtype=np.float64)))

    def backward(self, X: np.ndarray, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Parameter gradients for upstream gradient ``dlogits`` w.r.t. the logits."""
        _, cache = self._forward(X)
        if self.architecture == "linear-softmax":
            return {"W": X.T @ dlogits, "b": dlogits.sum(axis=0)}
        pre, h = cache
        p = self.params
        dh = dlogits @ p["W2"].T
        dpre = dh * (1.0 - h * h) if self.activation == "tanh" else dh * (pre > 0)
        return {"W1": X.T @ dpre, "b1": dpre.sum(axis=0), "W2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}

    def copy(self) -> "Classifier":
        return Classifier(self.architecture, self.d, self.K, {k: v.copy() for k, v in self.params.items()},
                          self.activation)


def init_classifier(architecture: str, d: int, K: int, hidden: int = 32, activation: str = "tanh",
                    rng: Optional[np.random.Generator] = None) -> Classifier:
    if architecture == "linear-softmax":
        return Classifier(architecture, d, K, {"W": np.zeros((d, K)), "b": np.zeros(K)}, activation)
    if architecture != "one-hidden-layer":
        raise ValidationError(f"unknown architecture {architecture!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = {
        "W1": rng.standard_normal((d, hidden)) / math.sqrt(d),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((hidden, K)) / math.sqrt(hidden),
        "b2": np.zeros(K),
    }
    return Classifier(architecture, d, K, params, activation)


def forward(model: Classifier, x) -> ProbDist:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise ValidationError(f"expected a feature vector of length {model.d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("feature vector contains non-finite values")
    return ProbDist(model.predict(x[None, :])[0])


def save_checkpoint(model: Classifier, path, seed: int = 0, iteration: int = 0) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "architecture": model.architecture,
        "activation": model.activation,
        "d": model.d,
        "K": model.K,
        "params": {k: {"shape": list(v.shape), "values": v.ravel(order="C").tolist()}
                   for k, v in model.params.items()},
        "seed": seed,
        "iteration": iteration,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Classifier:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValidationError(f"{path}: unsupported checkpoint schema_version {doc.get('schema_version')!r}")
    params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()}
    return Classifier(doc["architecture"], int(doc["d"]), int(doc["K"]), params, doc.get("activation", "tanh"))


# ---------------------------------------------------------------------------
# augmentation and sampling


@dataclass(frozen=True)
class AugmentationPolicy:
    kind: str = "identity"
    sigma_weak: float = 0.0
    sigma_strong: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "gaussian-noise"):
            raise ValidationError(f"unknown augmentation {self.kind!r}")
        if self.sigma_weak < 0 or self.sigma_strong < 0:
            raise ValidationError("noise scales must be >= 0")


def augment(x: np.ndarray, policy: AugmentationPolicy, strength: str, rng: np.random.Generator) -> np.ndarray:
    if policy.kind == "identity":
        return x
    sigma = policy.sigma_weak if strength == "weak" else policy.sigma_strong
    if sigma == 0:
        return x
    return x + sigma * rng.standard_normal(np.shape(x))


class BatchCycler:
    """Fixed-size batches from reshuffled passes over ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValidationError("cannot sample from an empty split")
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need > 0:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(need, self.n - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(out)


@dataclass
class Streams:
    """Independent generators derived from one master seed."""

    init: np.random.Generator
    labeled: np.random.Generator
    unlabeled: np.random.Generator
    labeled_aug: np.random.Generator
    unlabeled_aug: np.random.Generator
    calib_aug: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        children = np.random.SeedSequence(seed).spawn(6)
        return cls(*(np.random.Generator(np.random.PCG64(c)) for c in children))


# ---------------------------------------------------------------------------
# objective


def pseudo_label_hard(p_hat, tau: float) -> Optional[ProbDist]:
    """Point mass on the argmax when its probability reaches ``tau``, else ``None``."""
    if not 0 < tau <= 1:
        raise ValidationError(f"tau must lie in (0, 1], got {tau!r}")
    p = np.asarray(getattr(p_hat, "values", p_hat), dtype=np.float64)
    k = int(np.argmax(p))
    if p[k] < tau:
        return None
    w = np.zeros_like(p)
    w[k] = 1.0
    return ProbDist(w)


def possibility_rows(probs: np.ndarray, calibrator: ConformalCalibrator, normalization: Optional[str]) -> np.ndarray:
    """Possibility distributions for a batch of predictions; raw p-values when ``normalization`` is None."""
    raw, scores = calibrator.p_value_matrix(probs, return_scores=True)
    if normalization is None:
        return raw
    return normalize_rows(raw, normalization, scores)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class StepResult:
    labeled_loss: float
    unlabeled_loss: float
    total_loss: float
    possibility_profile: Optional[np.ndarray] = None
    grads: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)
    pis: Optional[np.ndarray] = field(default=None, repr=False)


def batch_objective(model: Classifier, lab_x, lab_y, unl_label_view, unl_train_view,
                    calibrator: Optional[ConformalCalibrator], cfg: TrainingConfig,
                    pis: Optional[np.ndarray] = None) -> StepResult:
    """Loss terms and parameter gradients for already-augmented batches.

    ``unl_label_view`` feeds pseudo-label construction and is not
    differentiated; ``unl_train_view`` receives the unlabeled gradient.
    Passing ``pis`` fixes the credal targets instead of querying the
    calibrator.
    """
    lab_y = np.asarray(lab_y, dtype=np.int64)
    B = len(lab_y)
    logp = _log_softmax(model.logits(lab_x))
    labeled_loss = float(-logp[np.arange(B), lab_y].mean())
    dl = np.exp(logp)
    dl[np.arange(B), lab_y] -= 1.0
    grads = model.backward(lab_x, dl / B)

    unlabeled_loss = 0.0
    profile = None
    if cfg.mode != "none" and unl_train_view is not None and len(unl_train_view):
        n_u = len(unl_train_view)
        target_probs = model.predict(unl_label_view) if pis is None or cfg.mode != "credal" else None
        z = model.logits(unl_train_view)
        p_train = softmax(z)
        if cfg.mode == "credal":
            if pis is None:
                if calibrator is None:
                    raise ValidationError("credal mode needs a calibrator")
                if calibrator.K != model.K:
                    raise ValidationError(f"calibrator K={calibrator.K} does not match model K={model.K}")
                pis = possibility_rows(target_probs, calibrator, cfg.normalization)
            p_r, losses, capped = project_rows(pis, p_train)
            if capped.any():
                raise NumericalError("credal projection hit its iteration cap")
            unlabeled_loss = float(losses.mean())
            du = np.where((losses > 0)[:, None], p_train - p_r, 0.0)
            profile = efficiency_profile(pis)
        else:
            top = np.argmax(target_probs, axis=1)
            mask = target_probs[np.arange(n_u), top] >= cfg.tau
            logq = _log_softmax(z)
            unlabeled_loss = float(np.where(mask, -logq[np.arange(n_u), top], 0.0).mean())
            du = p_train.copy()
            du[np.arange(n_u), top] -= 1.0
            du[~mask] = 0.0
        if cfg.lambda_u != 0:
            gu = model.backward(unl_train_view, du * (cfg.lambda_u / n_u))
            grads = {k: grads[k] + gu[k] for k in grads}
    total = labeled_loss + cfg.lambda_u * unlabeled_loss
    return StepResult(labeled_loss, unlabeled_loss, total, profile, grads, pis)


def _views(x, policy, rng):
    return augment(x, policy, "weak", rng), augment(x, policy, "strong", rng)


def train_step(model: Classifier, labeled_batch: Tuple[np.ndarray, np.ndarray], unlabeled_batch: Optional[np.ndarray],
               calibrator: Optional[ConformalCalibrator], cfg: TrainingConfig, rng) -> StepResult:
    """One SGD step on the combined objective; updates ``model`` in place.

    ``rng`` is either one generator used for all augmentation noise or a
    :class:`Streams` whose labeled and unlabeled noise streams are kept apart.
    """
    lab_rng, unl_rng = (rng.labeled_aug, rng.unlabeled_aug) if isinstance(rng, Streams) else (rng, rng)
    policy = cfg.augmentation_policy
    lab_x, lab_y = labeled_batch
    if len(lab_y) == 0:
        raise ValidationError("labeled batch is empty")
    lab_x = augment(np.asarray(lab_x, dtype=np.float64), policy, "weak", lab_rng)
    weak = strong = None
    if cfg.mode != "none" and unlabeled_batch is not None:
        if len(unlabeled_batch) == 0:
            raise ValidationError("unlabeled batch is empty")
        weak, strong = _views(np.asarray(unlabeled_batch, dtype=np.float64), policy, unl_rng)
    label_view, train_view = (weak, strong) if cfg.pseudo_label_view == "weak" else (strong, weak)
    res = batch_objective(model, lab_x, lab_y, label_view, train_view, calibrator, cfg)
    for k, g in res.grads.items():
        model.params[k] -= cfg.lr * g
    return res


def build_calibrator(model: Classifier, calib_x: np.ndarray, calib_y: np.ndarray, cfg: TrainingConfig,
                     rng: Optional[np.random.Generator] = None) -> ConformalCalibrator:
    x = np.asarray(calib_x, dtype=np.float64)
    if rng is not None:
        x = augment(x, cfg.augmentation_policy, cfg.calibration_view, rng)
    return calibrate(model.predict(x), calib_y, cfg.nonconformity)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunRecord:
    labeled_loss: List[float] = field(default_factory=list)
    unlabeled_loss: List[float] = field(default_factory=list)
    possibility_trace: List[List[float]] = field(default_factory=list)
    eval_iterations: List[int] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)
    final_accuracy: Optional[float] = None
    final_ece: Optional[float] = None
    validity: Optional[dict] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "labeled_loss": self.labeled_loss,
            "unlabeled_loss": self.unlabeled_loss,
            "possibility_trace": self.possibility_trace,
            "eval_iterations": self.eval_iterations,
            "test_accuracy": self.test_accuracy,
            "final_accuracy": self.final_accuracy,
            "final_ece": self.final_ece,
            "validity": self.validity,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(**doc)

    def trace_rows(self):
        K = len(self.possibility_trace[0]) if self.possibility_trace else 0
        header = ["iteration", "labeled_loss", "unlabeled_loss"] + [f"mean_pi_rank_{k}" for k in range(K)] \
            + ["test_accuracy"]
        acc = dict(zip(self.eval_iterations, self.test_accuracy))
        rows = []
        for t, (ll, lu) in enumerate(zip(self.labeled_loss, self.unlabeled_loss)):
            row = [t, ll, lu]
            if K:
                row += list(self.possibility_trace[t])
            row.append(acc.get(t, ""))
            rows.append(row)
        return header, rows


def recalibration_period(cfg: TrainingConfig, n_unlabeled: int) -> int:
    if cfg.recalibration_period is not None:
        return cfg.recalibration_period
    return max(1, math.ceil(n_unlabeled / (cfg.mu * cfg.batch_size)))


def train(cfg: TrainingConfig, data: SplitDataset) -> Tuple[Classifier, RunRecord]:
    """Run ``cfg.iterations`` SGD steps; deterministic for a given ``cfg.seed``."""
    if len(data.labeled_y) == 0:
        raise ValidationError("labeled split is empty")
    uses_unlabeled = cfg.mode != "none"
    if uses_unlabeled and len(data.unlabeled_x) == 0:
        raise ValidationError("unlabeled split is empty")
    if cfg.mode == "credal" and len(data.calib_y) == 0:
        raise ValidationError("calibration split is empty")
    streams = Streams.from_seed(cfg.seed)
    model = init_classifier(cfg.architecture, data.d, data.K, cfg.hidden, cfg.activation, streams.init)
    lab = BatchCycler(len(data.labeled_y), streams.labeled)
    unl = BatchCycler(len(data.unlabeled_x), streams.unlabeled) if uses_unlabeled else None
    period = recalibration_period(cfg, len(data.unlabeled_x)) if uses_unlabeled else 0
    n_u = cfg.mu * cfg.batch_size
    record = RunRecord()
    calibrator = None
    for t in range(cfg.iterations):
        if cfg.mode == "credal" and t % period == 0:
            calibrator = build_calibrator(model, data.calib_x, data.calib_y, cfg, streams.calib_aug)
        li = lab.next(cfg.batch_size)
        ub = data.unlabeled_x[unl.next(n_u)] if uses_unlabeled else None
        res = train_step(model, (data.labeled_x[li], data.labeled_y[li]), ub, calibrator, cfg, streams)
        if not (math.isfinite(res.labeled_loss) and math.isfinite(res.unlabeled_loss)):
            raise NumericalError("non-finite loss", t)
        record.labeled_loss.append(res.labeled_loss)
        record.unlabeled_loss.append(res.unlabeled_loss)
        if res.possibility_profile is not None:
            record.possibility_trace.append(res.possibility_profile.tolist())
        if (t + 1) % cfg.eval_period == 0 or t == cfg.iterations - 1:
            record.eval_iterations.append(t)
            record.test_accuracy.append(accuracy(model.predict(data.test_x), data.test_y) if len(data.test_y) else 0.0)
    if len(data.test_y):
        probs = model.predict(data.test_x)
        record.final_accuracy = accuracy(probs, data.test_y)
        record.final_ece = ece(probs, data.test_y).ece
    return model, record
