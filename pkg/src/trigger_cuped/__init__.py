"""Variance-reduced ITT estimation for experiments with one-sided triggering."""

from .balancing import BalanceProblem, BalanceSolution, balance_weights_to_scoreset, entropy_balance
from .data import (
    Assignment,
    CsvSchema,
    ExperimentDataset,
    GroupSummary,
    Mode,
    UnitRecord,
    group_summary,
    load_csv,
    partition,
    write_csv,
)
from .errors import (
    DataValidationError,
    InfeasibleBalanceError,
    ModeError,
    NumericalError,
    RankDeficientError,
    SeparationError,
)
from .estimators import (
    EstimateReport,
    Method,
    augmentation_tau0,
    cuped_one_sided,
    cuped_two_sided,
    naive_delta,
    residualize,
    trigger_dilute,
)
from .inference import (
    BootstrapResult,
    MeanZeroTest,
    bootstrap,
    estimate_one_sided,
    estimate_theta,
    estimate_two_sided,
    mean_zero_test,
    variance_trg1,
)
from .pipeline import ScoreSpec, TwoSidedSpec
from .rng import Rng
from .scoring import (
    LogisticModel,
    ScoreKind,
    ScoreSet,
    fit_logistic,
    principal_scores,
    propensity_scores,
    score_conversion,
)
from .simulation import DgpParams, Study, generate, mask_to_one_sided, run_study

__version__ = "0.1.0"
