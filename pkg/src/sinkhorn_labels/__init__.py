"""Soft label allocation for self-training via entropic optimal transport."""

from .errors import (
    ConfigError,
    InvalidInputError,
    NumericalFailureError,
    UnsupportedInstanceError,
)
from .sinkhorn import (
    LOG_ZERO,
    ScalingVars,
    SinkhornParams,
    SolveStatus,
    TransportProblem,
    marginal_residuals,
    sinkhorn_solve,
    transport_plan,
)
from .allocation import (
    C_MAX,
    P_FLOOR,
    AllocationConfig,
    AllocationSchedule,
    AllocationSummary,
    CostMatrix,
    SoftLabel,
    allocate,
    allocation_summary,
    build_padded_problem,
    cost_from_probabilities,
    empirical_bounds,
    schedule_value,
    soft_labels,
    wilson_upper_bounds,
)
from .oracle import (
    ExactSolution,
    assign_pseudo_labels,
    assign_top_rho,
    exact_sla_lp,
    exact_transport,
)
from .selftrain import (
    ASSIGNERS,
    DATASET_KINDS,
    UNLABELED,
    ClassifierParams,
    Dataset,
    LossParts,
    TrainConfig,
    TrainerState,
    assign_confidence_threshold,
    augment,
    cosine_lr,
    ema_update,
    evaluate,
    export_dataset,
    forward,
    import_dataset,
    init_params,
    loss_and_grad,
    make_dataset,
    nesterov_step,
    self_train,
)

__version__ = "0.1.0"
