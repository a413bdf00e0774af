"""Log-domain Sinkhorn-Knopp solver for balanced entropic optimal transport.

Solves min <Q, cost> over nonnegative Q with prescribed row and column sums,
regularized with strength ``gamma``. All kernel products are evaluated with
max-shifted log-sum-exp so the Gibbs kernel exp(-gamma * cost) is never
materialized; this keeps the iteration stable for gamma * cost well past the
range where a direct exponential underflows.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericalFailureError

# Log-space stand-in for a zero marginal. Large enough in magnitude that
# exp() underflows to exactly 0, but finite, so max-shifted reductions never
# produce inf - inf = nan the way -inf sentinels would.
LOG_ZERO = -1e30

DEFAULT_MAX_ITERS = 10_000

# Relative slack allowed between total row and column mass.
_BALANCE_RTOL = 1e-6


@dataclass
class TransportProblem:
    """A balanced transport instance: cost matrix plus target marginals.

    cost        : (m, p) array of finite, nonnegative log-costs
    row_targets : (m,) nonnegative target row sums
    col_targets : (p,) nonnegative target column sums
    """

    cost: np.ndarray
    row_targets: np.ndarray
    col_targets: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        self.row_targets = np.asarray(self.row_targets, dtype=float)
        self.col_targets = np.asarray(self.col_targets, dtype=float)
        if self.cost.ndim != 2:
            raise InvalidInputError("cost must be a 2-D matrix")
        m, p = self.cost.shape
        if self.row_targets.shape != (m,) or self.col_targets.shape != (p,):
            raise InvalidInputError(
                f"marginal shapes {self.row_targets.shape}, {self.col_targets.shape} "
                f"do not match cost shape {self.cost.shape}"
            )
        if not np.isfinite(self.cost).all():
            raise InvalidInputError("cost entries must be finite")
        if (self.cost < 0).any():
            raise InvalidInputError("cost entries must be nonnegative")
        if (self.row_targets < 0).any() or (self.col_targets < 0).any():
            raise InvalidInputError("marginals must be nonnegative")
        total_r = float(self.row_targets.sum())
        total_c = float(self.col_targets.sum())
        if abs(total_r - total_c) > _BALANCE_RTOL * max(1.0, total_r):
            raise InvalidInputError(
                f"unbalanced problem: row total {total_r!r} vs column total {total_c!r}"
            )

    @property
    def shape(self):
        return self.cost.shape


@dataclass
class SinkhornParams:
    """Solver knobs: regularization strength, l1 stopping tolerance, cap."""

    gamma: float
    tolerance: float
    max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")
        if not self.tolerance > 0:
            raise InvalidInputError("tolerance must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be at least 1")


@dataclass
class ScalingVars:
    """Log-domain scaling variables; exp(alpha), exp(beta) rescale the kernel."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.alpha.ndim != 1 or self.beta.ndim != 1:
            raise InvalidInputError("scaling variables must be 1-D vectors")
        if not (np.isfinite(self.alpha).all() and np.isfinite(self.beta).all()):
            raise InvalidInputError("scaling variables must be finite")


@dataclass
class SolveStatus:
    converged: bool
    iterations: int
    residual: float


def _logsumexp(a, axis):
    """Max-shifted log-sum-exp along ``axis``.

    Entries at LOG_ZERO behave as absent terms: they underflow to 0 under a
    finite shift, and an all-LOG_ZERO reduction stays at ~LOG_ZERO.
    """
    shift = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - shift), axis=axis))
    out += np.squeeze(shift, axis=axis)
    return out


def _log_or_zero(v):
    """Elementwise log with exact zeros mapped to the LOG_ZERO sentinel."""
    out = np.full(v.shape, LOG_ZERO)
    pos = v > 0
    out[pos] = np.log(v[pos])
    return out


def sinkhorn_solve(problem, params, warm_start=None):
    """Run Sinkhorn iteration until the l1 column residual drops below tolerance.

    Alternates the log-domain updates

        beta  <- log c - log(M^T exp(alpha))
        alpha <- log r - log(M exp(beta))

    with M = exp(-gamma * cost), starting from zeros (or ``warm_start``).
    The monitored residual is || c - column sums of the current plan ||_1;
    the alpha update re-breaks column feasibility, so the check runs at the
    top of each sweep.

    Returns (ScalingVars, SolveStatus). Hitting the iteration cap is reported
    via ``converged=False``, never silently; a non-finite scaling value raises
    NumericalFailureError instead.
    """
    m, p = problem.shape
    if warm_start is not None:
        if warm_start.alpha.shape != (m,) or warm_start.beta.shape != (p,):
            raise InvalidInputError(
                f"warm start shapes {warm_start.alpha.shape}, {warm_start.beta.shape} "
                f"do not match problem shape {problem.shape}"
            )
        alpha = warm_start.alpha.copy()
        beta = warm_start.beta.copy()
    else:
        alpha = np.zeros(m)
        beta = np.zeros(p)

    log_r = _log_or_zero(problem.row_targets)
    log_c = _log_or_zero(problem.col_targets)
    c = problem.col_targets

    converged = False
    iterations = 0
    # non-finite intermediates are detected and raised as typed errors, so
    # numpy's own overflow/invalid warnings would only be noise here
    with np.errstate(over="ignore", invalid="ignore"):
        log_kernel = -params.gamma * problem.cost
        if not np.isfinite(log_kernel).all():
            raise NumericalFailureError(
                f"gamma={params.gamma!r} overflows the log kernel"
            )
        while True:
            # log of M^T exp(alpha); reused by the beta update below
            col_log = _logsumexp(log_kernel + alpha[:, None], axis=0)
            residual = float(np.abs(c - np.exp(beta + col_log)).sum())
            if residual <= params.tolerance:
                converged = True
                break
            if iterations >= params.max_iters:
                break
            beta = log_c - col_log
            alpha = log_r - _logsumexp(log_kernel + beta[None, :], axis=1)
            if not (np.isfinite(alpha).all() and np.isfinite(beta).all()):
                raise NumericalFailureError(
                    f"non-finite scaling value at iteration {iterations + 1}"
                )
            iterations += 1

    return ScalingVars(alpha, beta), SolveStatus(converged, iterations, residual)


def transport_plan(problem, scaling, gamma):
    """Materialize the plan  Q_ij = exp(alpha_i - gamma * cost_ij + beta_j)."""
    if not gamma > 0:
        raise InvalidInputError("gamma must be positive")
    m, p = problem.shape
    if scaling.alpha.shape != (m,) or scaling.beta.shape != (p,):
        raise InvalidInputError(
            f"scaling shapes {scaling.alpha.shape}, {scaling.beta.shape} "
            f"do not match problem shape {problem.shape}"
        )
    log_plan = scaling.alpha[:, None] - gamma * problem.cost + scaling.beta[None, :]
    return np.exp(log_plan)


def marginal_residuals(problem, plan):
    """l1 distances between the plan's marginals and the targets."""
    plan = np.asarray(plan, dtype=float)
    if plan.shape != problem.shape:
        raise InvalidInputError(
            f"plan shape {plan.shape} does not match problem shape {problem.shape}"
        )
    row_residual = float(np.abs(problem.row_targets - plan.sum(axis=1)).sum())
    col_residual = float(np.abs(problem.col_targets - plan.sum(axis=0)).sum())
    return row_residual, col_residual
