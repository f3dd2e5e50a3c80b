"""Turn a flow on the spanner graph into a transport plan by shortcutting vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation
from .hiergraph import INPUT
from .plan import TransportPlan, coalesce, repair_marginals


@dataclass
class RecoveryReport:
    steps: int
    step_bound: int
    flow_cost: float
    plan_cost: float
    max_degree: int


class _FlowGraph:
    """Sparse positive net flow with in/out adjacency maps."""

    def __init__(self, n):
        self.out = [dict() for _ in range(n)]
        self.inn = [dict() for _ in range(n)]

    def add(self, u, w, amount, tol):
        if u == w or amount <= tol:
            return
        back = self.out[w].get(u, 0.0)
        if back > 0:
            if back > amount:
                self._set(w, u, back - amount, tol)
                return
            self._set(w, u, 0.0, tol)
            amount -= back
            if amount <= tol:
                return
        self._set(u, w, self.out[u].get(w, 0.0) + amount, tol)

    def _set(self, u, w, amount, tol):
        if amount <= tol:
            self.out[u].pop(w, None)
            self.inn[w].pop(u, None)
        else:
            self.out[u][w] = amount
            self.inn[w][u] = amount


def _shortcut(graph, v, tol, keep_out=0.0):
    """Route inflow of ``v`` directly to its successors.

    ``keep_out`` is outflow that stays at ``v`` (its own supply). Returns the
    number of pairing steps.
    """
    ins = sorted(graph.inn[v].items(), key=lambda kv: (-kv[1], kv[0]))
    outs = sorted(graph.out[v].items(), key=lambda kv: (-kv[1], kv[0]))
    transit = min(sum(m for _, m in ins), sum(m for _, m in outs) - keep_out)
    if transit <= tol:
        return 0
    steps = 0
    i = j = 0
    in_left = [m for _, m in ins]
    out_left = [m for _, m in outs]
    remaining = transit
    while remaining > tol and i < len(ins) and j < len(outs):
        amount = min(in_left[i], out_left[j], remaining)
        u, w = ins[i][0], outs[j][0]
        graph._set(u, v, graph.out[u].get(v, 0.0) - amount, tol)
        graph._set(v, w, graph.out[v].get(w, 0.0) - amount, tol)
        graph.add(u, w, amount, tol)
        in_left[i] -= amount
        out_left[j] -= amount
        remaining -= amount
        steps += 1
        if in_left[i] <= tol:
            i += 1
        if out_left[j] <= tol:
            j += 1
    return steps


def recover_plan(graph, mu, nu, vertex_of_a, vertex_of_b, flow, return_report=False):
    """Shortcut Steiner and transit vertices until every path is a single A to B hop.

    ``flow`` holds one value per directed arc, forward arcs first then reversed
    ones. ``vertex_of_a`` and ``vertex_of_b`` map point ids to graph vertices.
    """
    n_vertices = graph.n_vertices
    n_edges = graph.n_edges
    flow = np.asarray(flow, dtype=float)
    vertex_of_a = np.asarray(vertex_of_a, dtype=np.int64)
    vertex_of_b = np.asarray(vertex_of_b, dtype=np.int64)
    total = float(mu.total)
    tol = 1e-15 * total
    net = flow[:n_edges] - flow[n_edges:]
    lengths = graph.length
    flow_cost = float(np.dot(flow[:n_edges] + flow[n_edges:], lengths))

    eta = np.zeros(n_vertices)
    np.add.at(eta, vertex_of_a, mu.masses)
    np.add.at(eta, vertex_of_b, -nu.masses)
    outflow = np.zeros(n_vertices)
    np.add.at(outflow, graph.eu, net)
    np.add.at(outflow, graph.ev, -net)
    residual = np.abs(outflow - eta)
    crumb = 1e-9 * max(total, 1e-300)
    if residual.max(initial=0.0) > crumb:
        bad = int(np.argmax(residual))
        raise InvariantViolation(f"flow does not route the demand at vertex {bad}")

    fg = _FlowGraph(n_vertices)
    for e in np.flatnonzero(np.abs(net) > tol):
        if net[e] > 0:
            fg.add(int(graph.eu[e]), int(graph.ev[e]), float(net[e]), tol)
        else:
            fg.add(int(graph.ev[e]), int(graph.eu[e]), float(-net[e]), tol)

    degree = graph.degrees()
    max_degree = int(degree.max(initial=0))
    steiner = np.flatnonzero(graph.kind != INPUT)
    order = steiner[np.argsort(-degree[steiner], kind="stable")]
    steps = 0
    for v in order:
        steps += _shortcut(fg, int(v), tol)
    inputs = np.flatnonzero(graph.kind == INPUT)
    for v in inputs[np.argsort(-degree[inputs], kind="stable")]:
        steps += _shortcut(fg, int(v), tol, keep_out=max(eta[v], 0.0))

    a_at = {int(v): i for i, v in enumerate(vertex_of_a)}
    b_at = {int(v): j for j, v in enumerate(vertex_of_b)}
    src, dst, mass = [], [], []
    for v, j in b_at.items():
        i = a_at.get(v)
        if i is not None:
            src.append(i)
            dst.append(j)
            mass.append(min(mu.masses[i], nu.masses[j]))
    for u in range(n_vertices):
        for w, m in fg.out[u].items():
            if u not in a_at or w not in b_at:
                # rounding leftovers are absorbed by the marginal repair below
                if m <= crumb:
                    continue
                raise InvariantViolation(f"leftover flow {u}->{w} after shortcutting")
            src.append(a_at[u])
            dst.append(b_at[w])
            mass.append(m)
    plan = coalesce(np.array(src, np.int64), np.array(dst, np.int64), np.array(mass, float))
    plan = repair_marginals(plan, mu.masses, nu.masses)
    plan_cost = plan.evaluate(mu.points, nu.points)
    bound = n_edges * max_degree
    if steps > bound:
        raise InvariantViolation(f"recovery used {steps} steps, bound {bound}")
    if return_report:
        return plan, RecoveryReport(steps, bound, flow_cost, plan_cost, max_degree)
    return plan
