"""Conformal credal self-training on desk-scale classifiers."""

from .conformal import (
    ConformalCalibrator,
    NonConformityMeasure,
    RawPValues,
    calibrate,
    nonconformity,
    normalize_argmax_one,
    normalize_max_ratio,
    p_values,
    prediction_set,
)
from .credal_loss import (
    OracleConfig,
    ProjectionResult,
    credal_loss,
    credal_loss_gradient,
    credal_projection,
    oracle_projection,
)
from .data import Dataset, GeneratorSpec, SplitDataset, generate, load_csv, load_run, persist_run, split
from .metrics import (
    EceReport,
    ValidityReport,
    accuracy,
    aggregate_validity,
    coverage,
    ece,
    efficiency_profile,
    strong_validity_error,
)
from .prob import (
    CredalSet,
    PossDist,
    ProbDist,
    ValidationError,
    credal_membership,
    degenerate,
    kl_divergence,
    make_poss,
    make_prob,
    possibility_measure,
)
from .trainer import (
    Classifier,
    NumericalError,
    RunRecord,
    TrainingConfig,
    augment,
    forward,
    pseudo_label_hard,
    train,
    train_step,
)

__version__ = "0.1.0"
