"""Exact reference solvers for validating the entropic approximation.

The transportation LP is solved exactly by successive-shortest-path
min-cost flow with node potentials. Marginals must be integral: on such
instances every optimal vertex is integral and the flow solver attains the
true LP optimum, so no general-purpose simplex code is needed. Costs may
be arbitrary nonnegative reals; the potentials absorb them.

Also houses the two baseline label assigners that the allocation LP
degenerates to at the corner settings of (b, rho).
"""

import heapq
from dataclasses import dataclass

import numpy as np

from .allocation import build_padded_problem
from .errors import (
    InvalidInputError,
    NumericalFailureError,
    UnsupportedInstanceError,
)

_INT_ATOL = 1e-9


@dataclass
class ExactSolution:
    """An optimal plan, its objective <plan, cost>, and LP dual potentials.

    The duals satisfy row_duals[i] + col_duals[j] <= cost[i, j] with
    equality on the plan's support. For the padded allocation problem they
    cover the slack row and column as well.
    """

    plan: np.ndarray
    objective: float
    row_duals: np.ndarray = None
    col_duals: np.ndarray = None

    def __post_init__(self):
        self.plan = np.asarray(self.plan, dtype=float)
        if (self.plan < 0).any():
            raise InvalidInputError("plan entries must be nonnegative")
        if not np.isfinite(self.objective):
            raise InvalidInputError("objective must be finite")


class _FlowNetwork:
    """Adjacency-list residual graph; edge i and its reverse are i ^ 1."""

    def __init__(self, n_nodes):
        self.adj = [[] for _ in range(n_nodes)]
        self.to = []
        self.cap = []
        self.cost = []

    def add_edge(self, u, v, cap, cost):
        self.adj[u].append(len(self.to))
        self.to.append(v)
        self.cap.append(cap)
        self.cost.append(cost)
        self.adj[v].append(len(self.to))
        self.to.append(u)
        self.cap.append(0)
        self.cost.append(-cost)


def _dijkstra(net, source, potentials):
    n_nodes = len(net.adj)
    dist = [np.inf] * n_nodes
    parent_edge = [-1] * n_nodes
    dist[source] = 0.0
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for e in net.adj[u]:
            if net.cap[e] <= 0:
                continue
            v = net.to[e]
            # reduced cost; nonnegative in exact arithmetic, clamp rounding
            w = net.cost[e] + potentials[u] - potentials[v]
            if w < -1e-9:
                raise NumericalFailureError(
                    f"negative reduced cost {w!r} in flow solver"
                )
            w = max(w, 0.0)
            if d + w < dist[v]:
                dist[v] = d + w
                parent_edge[v] = e
                heapq.heappush(heap, (dist[v], v))
    return dist, parent_edge


def exact_transport(problem):
    """Exact optimum of a balanced transportation LP with integral marginals.

    Successive shortest paths on the bipartite graph source -> rows ->
    columns -> sink, with Dijkstra under node potentials. Every augmenting
    push is integral, so the returned plan is an integral optimal vertex.

    Raises UnsupportedInstanceError for non-integral marginals and
    InvalidInputError if the rounded totals disagree.
    """
    m, p = problem.shape
    r = np.rint(problem.row_targets)
    c = np.rint(problem.col_targets)
    if (np.abs(r - problem.row_targets) > _INT_ATOL).any() or (
        np.abs(c - problem.col_targets) > _INT_ATOL
    ).any():
        raise UnsupportedInstanceError("marginals must be integral")
    r = r.astype(int)
    c = c.astype(int)
    need = int(r.sum())
    if need != int(c.sum()):
        raise InvalidInputError(
            f"unbalanced totals: {need} vs {int(c.sum())}"
        )

    # nodes: 0 source, 1..m rows, m+1..m+p columns, m+p+1 sink
    source = 0
    sink = m + p + 1
    net = _FlowNetwork(m + p + 2)
    row_node = lambda i: 1 + i
    col_node = lambda j: 1 + m + j
    for i in range(m):
        net.add_edge(source, row_node(i), int(r[i]), 0.0)
    cell_edges = np.empty((m, p), dtype=int)
    for i in range(m):
        for j in range(p):
            cell_edges[i, j] = len(net.to)
            net.add_edge(row_node(i), col_node(j), need, float(problem.cost[i, j]))
    for j in range(p):
        net.add_edge(col_node(j), sink, int(c[j]), 0.0)

    potentials = [0.0] * (m + p + 2)
    sent = 0
    while sent < need:
        dist, parent_edge = _dijkstra(net, source, potentials)
        if not np.isfinite(dist[sink]):
            raise NumericalFailureError("no augmenting path in balanced instance")
        # capping at the sink distance keeps reduced costs nonnegative on
        # every residual edge, including those at unreachable nodes (e.g.
        # zero-marginal rows), so the final potentials are feasible duals
        for v in range(len(potentials)):
            potentials[v] += min(dist[v], dist[sink])
        bottleneck = need - sent
        v = sink
        while v != source:
            e = parent_edge[v]
            bottleneck = min(bottleneck, net.cap[e])
            v = net.to[e ^ 1]
        v = sink
        while v != source:
            e = parent_edge[v]
            net.cap[e] -= bottleneck
            net.cap[e ^ 1] += bottleneck
            v = net.to[e ^ 1]
        sent += bottleneck

    plan = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            plan[i, j] = net.cap[int(cell_edges[i, j]) ^ 1]
    objective = float((plan * problem.cost).sum())
    # final potentials are optimal duals: u_i + v_j <= cost_ij, tight on
    # the support (reduced costs of residual arcs are nonnegative)
    row_duals = -np.array([potentials[row_node(i)] for i in range(m)])
    col_duals = np.array([potentials[col_node(j)] for j in range(p)])
    return ExactSolution(plan, objective, row_duals, col_duals)


def exact_sla_lp(C, config):
    """Exact optimum of the allocation LP via the padded reduction.

    Builds the slack-augmented transport instance and solves it exactly;
    returns only the n x k block and its objective. The slack row and
    column carry zero cost, so the block objective equals the padded one.
    Requires configs whose padded targets are integral (n * b_j and the
    slack targets), otherwise UnsupportedInstanceError propagates.
    """
    padded = build_padded_problem(C, config)
    solution = exact_transport(padded)
    block = solution.plan[: C.n, : C.k]
    objective = float((block * C.values).sum())
    # duals are those of the padded instance, length n+1 and k+1
    return ExactSolution(block, objective, solution.row_duals, solution.col_duals)


def assign_pseudo_labels(C):
    """Per-row argmin class indices, ties broken toward the lowest index."""
    return np.argmin(C.values, axis=1)


def assign_top_rho(C, rho):
    """Hard top-rho assignment: the floor(rho * n) rows of smallest
    row-minimum cost, each paired with its argmin class.

    Ties in the row minima are broken by row index. Returns a set of
    (row, class) pairs; empty at rho = 0.
    """
    if not 0.0 <= rho <= 1.0:
        raise InvalidInputError("rho must lie in [0, 1]")
    # epsilon guards floor(0.3 * 10) = 2 style float artifacts
    count = int(np.floor(rho * C.n + 1e-9))
    if count == 0:
        return set()
    row_min = C.values.min(axis=1)
    order = np.argsort(row_min, kind="stable")
    argmins = np.argmin(C.values, axis=1)
    return {(int(i), int(argmins[i])) for i in order[:count]}
