"""Label allocation as entropically regularized optimal transport.

Given per-example class costs C_ij = -log p(j | x_i), the allocator
distributes at most one unit of label mass per example subject to per-class
caps b and a floor on the total allocated fraction rho. The inequality
constraints are absorbed into one extra slack row and column, giving a
balanced (n+1) x (k+1) transport instance that the log-domain Sinkhorn
solver handles directly. Scaling variables from the solve convert model
probabilities into soft labels, with the slack column acting as a soft
abstention threshold.
"""

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import InvalidInputError
from .sinkhorn import LOG_ZERO, SinkhornParams, TransportProblem, sinkhorn_solve

# Probabilities are floored before taking logs so gamma * cost stays
# representable; the induced cost ceiling is C_MAX = -log(P_FLOOR).
P_FLOOR = 1e-8
C_MAX = -float(np.log(P_FLOOR))

_SIMPLEX_ATOL = 1e-6

# Row mass below this counts as abstention in diagnostics. Raw mass
# fractions are the primary metric; this count is secondary.
_ABSTAIN_THRESHOLD = 0.5


@dataclass
class CostMatrix:
    """An n x k matrix of clamped negative log probabilities."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidInputError("cost values must be a 2-D matrix")
        n, k = self.values.shape
        if n < 1:
            raise InvalidInputError("cost matrix needs at least one row")
        if k < 2:
            raise InvalidInputError("cost matrix needs at least two classes")
        if not np.isfinite(self.values).all():
            raise InvalidInputError("cost entries must be finite")
        if (self.values < 0).any() or (self.values > C_MAX + 1e-9).any():
            raise InvalidInputError(f"cost entries must lie in [0, {C_MAX:.6f}]")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def k(self):
        return self.values.shape[1]


@dataclass
class AllocationConfig:
    """Constraint set for one allocation solve.

    upper_bounds     : per-class caps on the allocated fraction
    rho              : floor on the total fraction of examples labeled
    gamma            : entropic regularization strength
    tolerance_factor : stopping tolerance as a fraction of ||c||_1
    """

    upper_bounds: np.ndarray
    rho: float
    gamma: float
    tolerance_factor: float = 0.01

    def __post_init__(self):
        self.upper_bounds = np.asarray(self.upper_bounds, dtype=float)
        if self.upper_bounds.ndim != 1 or self.upper_bounds.size < 1:
            raise InvalidInputError("upper_bounds must be a nonempty vector")
        if not np.isfinite(self.upper_bounds).all() or (self.upper_bounds < 0).any():
            raise InvalidInputError("upper_bounds must be finite and nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidInputError("rho must lie in [0, 1]")
        if not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")
        if not self.tolerance_factor > 0:
            raise InvalidInputError("tolerance_factor must be positive")


@dataclass
class SoftLabel:
    """Per-class weights plus explicit abstention mass, summing to one."""

    weights: np.ndarray
    abstain_weight: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 1:
            raise InvalidInputError("weights must be a vector")
        if (self.weights < 0).any() or self.abstain_weight < 0:
            raise InvalidInputError("soft label weights must be nonnegative")
        total = float(self.weights.sum()) + self.abstain_weight
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"soft label mass {total!r} is not 1")

    @property
    def mass(self):
        """Total class mass; 1 - mass is the abstention weight."""
        return float(self.weights.sum())


@dataclass
class AllocationSchedule:
    """Allocation fraction rho as a function of the iteration t in [1, T].

    kind is one of linear_ramp, truncated_ramp, constant. The ramp runs
    from 0 at t=1 to 1 at t=T; the truncated variant caps it; constant
    ignores t entirely.
    """

    kind: str
    horizon: int
    cap: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear_ramp", "truncated_ramp", "constant"):
            raise InvalidInputError(f"unknown schedule kind {self.kind!r}")
        min_horizon = 1 if self.kind == "constant" else 2
        if self.horizon < min_horizon:
            raise InvalidInputError(f"horizon must be >= {min_horizon} for {self.kind}")
        if not 0.0 <= self.cap <= 1.0:
            raise InvalidInputError("cap must lie in [0, 1]")
        if not 0.0 <= self.value <= 1.0:
            raise InvalidInputError("value must lie in [0, 1]")

    @classmethod
    def linear_ramp(cls, horizon):
        return cls(kind="linear_ramp", horizon=horizon)

    @classmethod
    def truncated_ramp(cls, cap, horizon):
        return cls(kind="truncated_ramp", horizon=horizon, cap=cap)

    @classmethod
    def constant(cls, value, horizon):
        return cls(kind="constant", horizon=horizon, value=value)


@dataclass
class AllocationSummary:
    """Diagnostics extracted from a padded plan's n x k block."""

    allocated_fraction: float
    per_class_mass: np.ndarray
    abstained_rows: int


def _check_simplex_rows(probs, what):
    if probs.ndim != 2:
        raise InvalidInputError(f"{what} must be a 2-D matrix")
    if not np.isfinite(probs).all():
        raise InvalidInputError(f"{what} entries must be finite")
    if (probs < 0).any():
        raise InvalidInputError(f"{what} entries must be nonnegative")
    row_sums = probs.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > _SIMPLEX_ATOL
    if bad.any():
        i = int(np.argmax(bad))
        raise InvalidInputError(f"{what} row {i} sums to {row_sums[i]!r}, not 1")


def cost_from_probabilities(probs):
    """Clamped negative log of a row-stochastic probability matrix."""
    probs = np.asarray(probs, dtype=float)
    _check_simplex_rows(probs, "probability matrix")
    values = -np.log(np.maximum(probs, P_FLOOR))
    # row sums within 1e-6 of 1 allow entries a hair above 1; clip the
    # resulting tiny negative costs back to 0
    return CostMatrix(np.clip(values, 0.0, C_MAX))


def build_padded_problem(C, config):
    """Balanced transport instance absorbing the allocation inequalities.

    One slack row and column with zero cost receive whatever mass the caps
    and the rho floor leave unassigned. With mu = 1 - sum(b) split into
    positive and negative parts, the targets are

        r = [1, ..., 1, 1 + k + n(1 - rho - mu_minus)]
        c = [1 + n b_1, ..., 1 + n b_k, 1 + n(1 - rho + mu_plus)]

    whose totals agree identically in mu, so the instance is balanced.
    The +1 offsets keep every constraint strictly feasible.
    """
    if config.upper_bounds.size != C.k:
        raise InvalidInputError(
            f"upper_bounds has length {config.upper_bounds.size}, expected {C.k}"
        )
    n, k = C.n, C.k
    mu = 1.0 - float(config.upper_bounds.sum())
    mu_plus = max(mu, 0.0)
    mu_minus = min(mu, 0.0)

    padded = np.zeros((n + 1, k + 1))
    padded[:n, :k] = C.values

    row_targets = np.ones(n + 1)
    row_targets[n] = 1.0 + k + n * (1.0 - config.rho - mu_minus)
    col_targets = np.ones(k + 1)
    col_targets[:k] += n * config.upper_bounds
    col_targets[k] = 1.0 + n * (1.0 - config.rho + mu_plus)

    return TransportProblem(padded, row_targets, col_targets)


def allocate(C, config, warm_start=None):
    """Solve the padded allocation problem; returns (ScalingVars, SolveStatus).

    The stopping tolerance is tolerance_factor * ||c||_1, so it scales with
    the instance. Scalings have length n+1 and k+1.
    """
    problem = build_padded_problem(C, config)
    tolerance = config.tolerance_factor * float(problem.col_targets.sum())
    params = SinkhornParams(gamma=config.gamma, tolerance=tolerance)
    return sinkhorn_solve(problem, params, warm_start=warm_start)


def soft_labels(prob_rows, beta, gamma):
    """Rescale predicted distributions into soft labels with abstention.

    Per row the unnormalized weights are [p_1^gamma e^{beta_1}, ...,
    p_k^gamma e^{beta_k}, e^{beta_{k+1}}]; normalizing to total mass 1
    makes the first k entries the label weights and the last the
    abstention weight. The trailing beta entry therefore acts as a soft
    confidence threshold. Everything is computed in log domain.
    """
    prob_rows = np.asarray(prob_rows, dtype=float)
    beta = np.asarray(beta, dtype=float)
    _check_simplex_rows(prob_rows, "probability matrix")
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    m, k = prob_rows.shape
    if beta.shape != (k + 1,):
        raise InvalidInputError(f"beta has shape {beta.shape}, expected ({k + 1},)")
    if not np.isfinite(beta).all():
        raise InvalidInputError("beta must be finite")

    log_p = np.full((m, k), LOG_ZERO)
    pos = prob_rows > 0
    log_p[pos] = np.log(prob_rows[pos])

    scores = np.empty((m, k + 1))
    scores[:, :k] = gamma * log_p + beta[:k]
    scores[:, k] = beta[k]
    shift = scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(scores - shift).sum(axis=1, keepdims=True)) + shift
    weights = np.exp(scores - log_norm)

    return [SoftLabel(weights[i, :k], float(weights[i, k])) for i in range(m)]


def wilson_upper_bounds(class_counts, confidence):
    """Upper endpoints of the two-sided Wilson score interval per class.

    With z the standard normal quantile at (1 + confidence)/2 and
    p = count_j / n over n total labels,

        b_j = (p + z^2/2n + z sqrt(p(1-p)/n + z^2/4n^2)) / (1 + z^2/n)

    clamped to at most 1. Unseen classes (count 0) still get a positive
    bound, which is the point of using an interval rather than the raw
    proportions.
    """
    counts = np.asarray(class_counts)
    if counts.ndim != 1 or counts.size < 1:
        raise InvalidInputError("class_counts must be a nonempty vector")
    if not np.issubdtype(counts.dtype, np.integer):
        raise InvalidInputError("class_counts must be integers")
    if (counts < 0).any():
        raise InvalidInputError("class_counts must be nonnegative")
    total = int(counts.sum())
    if total < 1:
        raise InvalidInputError("class_counts must sum to at least 1")
    if not 0.0 < confidence < 1.0:
        raise InvalidInputError("confidence must lie in (0, 1)")

    z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
    p_hat = counts.astype(float) / total
    z2n = z * z / total
    center = p_hat + z2n / 2.0
    spread = z * np.sqrt(p_hat * (1.0 - p_hat) / total + z2n / (4.0 * total))
    return np.minimum((center + spread) / (1.0 + z2n), 1.0)


def empirical_bounds(class_counts):
    """Per-class label proportions count_j / sum(counts)."""
    counts = np.asarray(class_counts, dtype=float)
    if counts.ndim != 1 or counts.size < 1:
        raise InvalidInputError("class_counts must be a nonempty vector")
    if (counts < 0).any():
        raise InvalidInputError("class_counts must be nonnegative")
    total = counts.sum()
    if not total >= 1:
        raise InvalidInputError("class_counts must sum to at least 1")
    return counts / total


def schedule_value(schedule, t):
    """Evaluate an AllocationSchedule at iteration t in [1, T]."""
    if not 1 <= t <= schedule.horizon:
        raise InvalidInputError(
            f"t={t} outside schedule range [1, {schedule.horizon}]"
        )
    if schedule.kind == "constant":
        return schedule.value
    ramp = (t - 1) / (schedule.horizon - 1)
    if schedule.kind == "truncated_ramp":
        return min(schedule.cap, ramp)
    return ramp


def allocation_summary(plan):
    """Mass diagnostics for a padded plan: fraction allocated, per-class
    totals over real columns, and the count of effectively abstained rows."""
    plan = np.asarray(plan, dtype=float)
    if plan.ndim != 2 or plan.shape[0] < 2 or plan.shape[1] < 3:
        raise InvalidInputError("plan must be a padded matrix, at least 2x3")
    n = plan.shape[0] - 1
    block = plan[:n, :-1]
    row_mass = block.sum(axis=1)
    return AllocationSummary(
        allocated_fraction=float(block.sum()) / n,
        per_class_mass=block.sum(axis=0),
        abstained_rows=int((row_mass < _ABSTAIN_THRESHOLD).sum()),
    )
