"""Shared test oracles and instance generators.

Everything here is deliberately independent of the package's solver paths:
the enumeration oracle brute-forces integral plans, the Wilson reference
comes from statsmodels, and the batched pre-solver only manufactures warm
starts that the shipped solver then certifies against its own tolerance.
"""

import numpy as np

from sinkhorn_labels import (
    AllocationConfig,
    ScalingVars,
    cost_from_probabilities,
)

LOG_ZERO = -1e30

# acceptance tests append their one-line verdicts here; the conftest
# terminal-summary hook re-emits them after the run so they stay visible
# even with output capture on
ACCEPTANCE_LINES = []


def enumerate_min(cost, row_targets, col_targets):
    """Exact transport optimum by depth-first enumeration of integral plans.

    Feasible only for tiny instances (total flow <= ~8). Returns the best
    objective; costs are real, marginals integral.
    """
    cost = np.asarray(cost, dtype=float)
    m, p = cost.shape
    row_left = np.asarray(row_targets, dtype=int).copy()
    col_left = np.asarray(col_targets, dtype=int).copy()
    best = [np.inf]

    def rec(cell, acc):
        if acc >= best[0]:
            return
        if cell == m * p:
            best[0] = acc
            return
        i, j = divmod(cell, p)
        hi = min(row_left[i], col_left[j])
        # the last column of a row must absorb the row's remainder
        if j == p - 1:
            f = row_left[i]
            if f > col_left[j]:
                return
            choices = (f,)
        else:
            choices = range(hi, -1, -1)
        for f in choices:
            row_left[i] -= f
            col_left[j] -= f
            rec(cell + 1, acc + f * cost[i, j])
            row_left[i] += f
            col_left[j] += f

    rec(0, 0.0)
    return best[0]


def batched_warm_starts(problems, gamma, tolerances, omega=1.8,
                        max_sweeps=4_000_000, check_every=64):
    """Vector over instances of the same scaling sweeps, as a warm-start
    factory for large certification suites.

    All instances iterate together in one padded (B, R, C) tensor; each is
    dropped from the batch once its own column residual clears its target.
    omega over-relaxes the updates (stable below 2 on these instances).
    Every third residual check applies a componentwise Aitken delta-squared
    jump built from the last three checkpoints of (alpha, beta); degenerate
    instances approach their scalings along a 1/t tail that plain sweeps
    need ~1/tolerance iterations to walk, and the extrapolation lands the
    jump near the limit in a handful of cycles. Each jump is validated
    against the column residual and reverted per instance unless it strictly
    improves; without that check a garbage extrapolation (snapshots taken
    on a recovery transient rather than a settled tail) can corrupt the
    state and then re-corrupt it every cycle. The shipped solver still
    re-checks every returned warm start against the real tolerance, so this
    helper only has to be fast, not trusted.

    The returned scalings mirror the solver's own state structure: alpha is
    a plain (unrelaxed) row update of the gating beta, so rows are exact by
    construction and the gated column residual is measured on exactly the
    configuration the solver re-measures at iteration zero. An omega-relaxed
    or extrapolated alpha would leave rows loose even when columns pass.
    """
    nb = len(problems)
    nr = max(problem.shape[0] for problem in problems)
    nc = max(problem.shape[1] for problem in problems)
    log_kernel = np.full((nb, nr, nc), LOG_ZERO)
    log_r = np.full((nb, nr), LOG_ZERO)
    log_c = np.full((nb, nc), LOG_ZERO)
    c_full = np.zeros((nb, nc))
    for idx, problem in enumerate(problems):
        m, p = problem.shape
        log_kernel[idx, :m, :p] = -gamma * problem.cost
        for vec, log_out, width in ((problem.row_targets, log_r, m),
                                    (problem.col_targets, log_c, p)):
            positive = vec > 0
            log_out[idx, :width][positive] = np.log(vec[positive])
        c_full[idx, :p] = problem.col_targets
    tol = np.asarray(tolerances, dtype=float)

    alpha_out = np.zeros((nb, nr))
    beta_out = np.zeros((nb, nc))
    active = np.arange(nb)
    alpha = np.zeros((nb, nr))
    beta = np.zeros((nb, nc))

    def col_residual(a_now, b_now):
        shifted = log_kernel + a_now[:, :, None]
        mx = shifted.max(axis=1)
        col_log = np.log(np.exp(shifted - mx[:, None, :]).sum(axis=1)) + mx
        # an extrapolation overshoot can overflow the residual to inf; that
        # reads as not-converged (and fails jump validation) as intended
        with np.errstate(over="ignore"):
            return np.abs(c_full - np.exp(b_now + col_log)).sum(axis=1)

    def plain_row_update(b_now):
        shifted = log_kernel + b_now[:, None, :]
        mx = shifted.max(axis=2)
        row_log = np.log(np.exp(shifted - mx[:, :, None]).sum(axis=2)) + mx
        return log_r - row_log

    snaps = []
    sweeps = 0
    while sweeps < max_sweeps and active.size:
        for _ in range(check_every):
            shifted = log_kernel + alpha[:, :, None]
            mx = shifted.max(axis=1)
            col_log = np.log(np.exp(shifted - mx[:, None, :]).sum(axis=1)) + mx
            beta += omega * (log_c - col_log - beta)
            shifted = log_kernel + beta[:, None, :]
            mx = shifted.max(axis=2)
            row_log = np.log(np.exp(shifted - mx[:, :, None]).sum(axis=2)) + mx
            alpha += omega * (log_r - row_log - alpha)
            sweeps += 1
        plain_alpha = plain_row_update(beta)
        done = col_residual(plain_alpha, beta) <= tol
        if done.any():
            alpha_out[active[done]] = plain_alpha[done]
            beta_out[active[done]] = beta[done]
            keep = ~done
            active = active[keep]
            log_kernel, log_r, log_c = \
                log_kernel[keep], log_r[keep], log_c[keep]
            c_full, alpha, beta, tol = \
                c_full[keep], alpha[keep], beta[keep], tol[keep]
            snaps = [(a[keep], b[keep]) for a, b in snaps]
        if len(snaps) == 2:
            base = col_residual(alpha, beta)
            held_alpha = alpha.copy()
            held_beta = beta.copy()
            for cur, x0, x1 in ((alpha, snaps[0][0], snaps[1][0]),
                                (beta, snaps[0][1], snaps[1][1])):
                d1 = x1 - x0
                d2 = cur - x1
                denom = d2 - d1
                usable = np.abs(denom) > 1e-12
                jump = np.zeros_like(cur)
                jump[usable] = (d2[usable] ** 2) / denom[usable]
                np.clip(jump, -1e6, 1e6, out=jump)
                cur -= jump
            # nan/inf trial residuals compare false and revert
            worse = ~(col_residual(alpha, beta) < base)
            if worse.any():
                alpha[worse] = held_alpha[worse]
                beta[worse] = held_beta[worse]
            snaps = []
        else:
            snaps.append((alpha.copy(), beta.copy()))
    if active.size:
        alpha_out[active] = plain_row_update(beta)
        beta_out[active] = beta
    out = []
    for idx, problem in enumerate(problems):
        m, p = problem.shape
        out.append(ScalingVars(alpha_out[idx, :m].copy(),
                               beta_out[idx, :p].copy()))
    return out


def random_integral_sla_instance(rng, gamma=1000.0, tolerance_factor=1.0):
    """A random allocation instance whose padded marginals are integral.

    b and rho are multiples of 1/n, which makes n*b, n*rho, and n*mu all
    integers, so the padded targets are integral and the flow oracle is
    exact on them.
    """
    n = int(rng.integers(2, 11))
    k = int(rng.integers(2, 5))
    concentration = rng.uniform(0.3, 3.0)
    probs = rng.dirichlet(np.full(k, concentration), size=n)
    C = cost_from_probabilities(probs)
    b = rng.integers(0, n + 1, size=k) / n
    rho = int(rng.integers(0, n + 1)) / n
    config = AllocationConfig(b, rho=rho, gamma=gamma,
                              tolerance_factor=tolerance_factor)
    return C, config


def separated_cost_matrix(rng, n, k, argmin_margin=0.1, row_margin=0.05):
    """Costs with unique per-row argmins and pairwise separated row minima.

    Within each row the best class beats the runner-up by at least
    argmin_margin; across rows the minima differ pairwise by at least
    row_margin. This removes every ambiguity except the deliberate one-unit
    constraint slack of the padded formulation.
    """
    minima = rng.permutation(n) * (row_margin * 1.5) + rng.uniform(0.1, 0.4)
    values = np.empty((n, k))
    for i in range(n):
        j = int(rng.integers(0, k))
        values[i] = minima[i] + argmin_margin + rng.uniform(0.0, 2.0, size=k)
        values[i, j] = minima[i]
    return values


def wilson_reference(class_counts, confidence):
    """Independent Wilson upper endpoints via statsmodels."""
    from statsmodels.stats.proportion import proportion_confint

    counts = np.asarray(class_counts)
    total = int(counts.sum())
    return np.array([
        proportion_confint(int(count), total, alpha=1.0 - confidence,
                           method="wilson")[1]
        for count in counts
    ])


def finite_difference_grads(loss_fn, params_arrays, step=1e-5):
    """Central finite differences of loss_fn over a list of arrays."""
    grads = []
    for arr in params_arrays:
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        grad_flat = grad.ravel()
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            up = loss_fn()
            flat[idx] = original - step
            down = loss_fn()
            flat[idx] = original
            grad_flat[idx] = (up - down) / (2.0 * step)
        grads.append(grad)
    return grads
