"""Ranking from pairwise judge probabilities with uncertainty-aware comparison selection."""

from .errors import (
    ConvergenceError,
    EmptyPoolError,
    InvalidInputError,
    LogParseError,
    PoeRankError,
    SingularityError,
    UndefinedMetricError,
)
from .experts import (
    AbsoluteAssessment,
    AbsoluteExpert,
    Comparison,
    ExpertForm,
    anneal,
    debias,
    effective_var,
    grad_pair,
    hess_pair,
    log_density_absolute,
    log_density_pair,
    moment_match,
)
from .judges import SyntheticJudgeConfig, simulate_context, simulate_suite
from .metrics import (
    CalibrationReport,
    Trajectory,
    TrajectoryRecord,
    auroc,
    calibration_report,
    ece,
    efficiency_at_90,
    fit_temperature,
    rejection_curve,
    spearman,
)
from .posterior import (
    JointModel,
    PosteriorState,
    entropy,
    fit_home_advantage,
    fit_posterior,
    grad_log_joint,
    hessian_log_joint,
    laplace,
    log_joint,
    map_estimate,
)
from .selection import (
    CandidatePool,
    SelectionPolicy,
    reorder_probability,
    run_selection_loop,
    score_pair,
    select_next,
)

__version__ = "0.1.0"
