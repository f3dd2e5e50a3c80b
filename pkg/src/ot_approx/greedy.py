"""Bottom-up greedy primal-dual flow on the hierarchical spanner graph.

Every cell routes the excess of its children and subcells to its own center
with an exact local min-cost flow on its greedy edges. Local duals are then
stitched together top-down so that each cell's duals are offset by the dual of
its center as seen from the parent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantViolation
from .exact import FlowState, solve_mcf
from .hiergraph import GREEDY, SHORTCUT

C_RHO = 8.0


def rho_bound(d, height, eps, c_rho=C_RHO):
    return c_rho * d**1.5 * height / eps


@dataclass
class LocalInstance:
    cell: int
    members: np.ndarray
    edges: np.ndarray
    tails: np.ndarray
    heads: np.ndarray
    costs: np.ndarray
    child_slots: np.ndarray
    child_ids: np.ndarray
    own_slots: np.ndarray


class GreedyOracle:
    """Precomputed local instances for repeated greedy calls on one graph."""

    def __init__(self, graph, tree):
        self.graph = graph
        self.tree = tree
        self.n_cells = len(tree.cells)
        self.parent = np.array([c.parent for c in tree.cells])
        self.locals = []
        n_edges = graph.n_edges
        for c in tree.cells:
            members = graph.local_vertices[c.id]
            edges = graph.local_edges[c.id]
            slot = {int(v): i for i, v in enumerate(members)}
            lu = np.array([slot[int(v)] for v in graph.eu[edges]], dtype=np.int64)
            lv = np.array([slot[int(v)] for v in graph.ev[edges]], dtype=np.int64)
            n_child = len(c.children)
            child_slots = np.arange(1, 1 + n_child) if not c.is_leaf else np.zeros(0, np.int64)
            own = np.arange(1 + n_child, len(members))
            self.locals.append(
                LocalInstance(
                    c.id, members, np.r_[edges, edges + n_edges],
                    np.r_[lu, lv], np.r_[lv, lu], np.r_[graph.length[edges], graph.length[edges]],
                    child_slots, np.asarray(c.children, dtype=np.int64), own,
                )
            )
        self.arc_length = np.r_[graph.length, graph.length]
        self.arc_tail = np.r_[graph.eu, graph.ev]
        self.arc_head = np.r_[graph.ev, graph.eu]

    def excess(self, eta):
        """Total demand owned by each subtree, indexed by cell id."""
        own = np.bincount(self.graph.owner, weights=eta, minlength=self.n_cells)
        out = own.copy()
        for cid in range(self.n_cells - 1, 0, -1):
            out[self.parent[cid]] += out[cid]
        return out

    def local_demand(self, inst, eta, excess):
        dem = np.zeros(len(inst.members))
        dem[inst.child_slots] = excess[inst.child_ids]
        dem[inst.own_slots] = eta[inst.members[inst.own_slots]]
        dem[0] = -dem[1:].sum()
        return dem

    def flow(self, eta):
        """Greedy flow routing ``eta`` (positive = supply) and synchronized duals."""
        eta = np.asarray(eta, dtype=float).copy()
        scale = np.abs(eta).sum() / 2
        flow = np.zeros(2 * self.graph.n_edges)
        y = np.zeros(self.graph.n_vertices)
        if scale == 0:
            return FlowState(flow, y)
        eta[np.abs(eta) < 1e-15 * scale] = 0.0
        excess = self.excess(eta)
        local_y = []
        for inst in self.locals:
            dem = self.local_demand(inst, eta, excess)
            if np.any(dem):
                f, yl = solve_mcf(
                    len(inst.members), inst.tails, inst.heads, inst.costs, dem, method="simplex"
                )
                flow[inst.edges] += f
            else:
                yl = np.zeros(len(inst.members))
            local_y.append(yl)
        centers = self.graph.center_vertex
        for inst, yl in zip(self.locals, local_y):
            offset = y[centers[inst.cell]] - yl[0]
            y[inst.members[1:]] = yl[1:] + offset
        return FlowState(flow, y)


def greedy_flow(graph, tree, eta):
    return GreedyOracle(graph, tree).flow(eta)


def net_outflow(graph, flow):
    n = graph.n_vertices
    tails = np.r_[graph.eu, graph.ev]
    heads = np.r_[graph.ev, graph.eu]
    return np.bincount(tails, flow, n) - np.bincount(heads, flow, n)


def check_c1_c2(graph, state, eta, rho):
    """Per-edge dual slack ratios and the strong-duality gap."""
    dy = np.abs(state.y[graph.eu] - state.y[graph.ev])
    ratio = dy / graph.length
    greedy = graph.edge_kind == GREEDY
    shortcut = graph.edge_kind == SHORTCUT
    cost = float(np.dot(state.flow, np.r_[graph.length, graph.length]))
    dual = float(np.dot(state.y, eta))
    gap = cost - dual
    rel = abs(gap) / max(abs(cost), 1e-300) if cost else abs(gap)
    greedy_max = float(ratio[greedy].max(initial=0.0))
    shortcut_max = float(ratio[shortcut].max(initial=0.0))
    return {
        "greedy_max_ratio": greedy_max,
        "shortcut_max_ratio": shortcut_max,
        "max_ratio": max(greedy_max, shortcut_max),
        "rho": float(rho),
        "c1_pass": greedy_max <= 1 + 1e-7 and shortcut_max <= rho,
        "flow_cost": cost,
        "dual_value": dual,
        "c2_gap": gap,
        "c2_rel_gap": rel,
        "c2_pass": rel <= 1e-7,
        "conservation": float(np.abs(net_outflow(graph, state.flow) - eta).max(initial=0.0)),
        "off_greedy_flow": float(np.abs(state.flow[np.r_[shortcut, shortcut]]).max(initial=0.0)),
    }


def assert_certificates(report, total):
    if not report["c1_pass"] or not report["c2_pass"]:
        raise InvariantViolation(f"greedy certificate failed: {report}")
    if report["conservation"] > 1e-9 * max(total, 1e-300):
        raise InvariantViolation("greedy flow does not conserve demand")
