"""Exact uncapacitated min-cost flow with dual certificates.

Successive shortest paths with vertex potentials (primal-dual form): every
phase runs one multi-source Dijkstra on reduced costs, updates the potentials,
and then pushes flow along shortest-path-tree paths from settled deficits back
to the supply that reached them. Those paths are tight, so optimality is kept.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist

from .errors import InfeasibleError, InputError, InvariantViolation
from .measures import MASS_RTOL
from .plan import TransportPlan, repair_marginals


FEW_TARGETS = 64


@njit(cache=True)
def _csr(keys, n):
    counts = np.zeros(n + 1, dtype=np.int64)
    for k in keys:
        counts[k + 1] += 1
    for i in range(n):
        counts[i + 1] += counts[i]
    order = np.empty(len(keys), dtype=np.int64)
    fill = counts[:-1].copy()
    for a in range(len(keys)):
        order[fill[keys[a]]] = a
        fill[keys[a]] += 1
    return counts, order


@njit(cache=True)
def _ssp_kernel(n, tail, head, cost, excess, tol):
    """Returns (flow, potential, status); status 0 ok, 1 unreachable demand."""
    m = len(tail)
    out_start, out_arcs = _csr(tail, n)
    in_start, in_arcs = _csr(head, n)
    flow = np.zeros(m)
    pi = np.zeros(n)
    dist = np.empty(n)
    done = np.zeros(n, dtype=np.bool_)
    pred = np.empty(n, dtype=np.int64)
    fwd = np.empty(n, dtype=np.bool_)
    root = np.empty(n, dtype=np.int64)
    settled = np.empty(n, dtype=np.int64)
    while True:
        has_src = False
        has_sink = False
        for v in range(n):
            if excess[v] > tol:
                has_src = True
            elif excess[v] < -tol:
                has_sink = True
        if not (has_src and has_sink):
            return flow, pi, 0
        heap = [(0.0, np.int64(-1))]
        heap.pop()
        for v in range(n):
            dist[v] = np.inf
            done[v] = False
            if excess[v] > tol:
                dist[v] = 0.0
                pred[v] = -1
                root[v] = v
                heap.append((0.0, np.int64(v)))
        heapq.heapify(heap)
        count = 0
        maxd = 0.0
        while len(heap) > 0:
            d, u = heapq.heappop(heap)
            if done[u]:
                continue
            done[u] = True
            settled[count] = u
            count += 1
            maxd = d
            for k in range(out_start[u], out_start[u + 1]):
                a = out_arcs[k]
                v = head[a]
                if done[v]:
                    continue
                rc = cost[a] + pi[u] - pi[v]
                if rc < 0.0:
                    rc = 0.0
                nd = d + rc
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = a
                    fwd[v] = True
                    root[v] = root[u]
                    heapq.heappush(heap, (nd, v))
            for k in range(in_start[u], in_start[u + 1]):
                a = in_arcs[k]
                if flow[a] <= 0.0:
                    continue
                v = tail[a]
                if done[v]:
                    continue
                rc = -cost[a] + pi[u] - pi[v]
                if rc < 0.0:
                    rc = 0.0
                nd = d + rc
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = a
                    fwd[v] = False
                    root[v] = root[u]
                    heapq.heappush(heap, (nd, v))
        for v in range(n):
            if done[v]:
                pi[v] += dist[v]
            else:
                pi[v] += maxd
        pushed = False
        for idx in range(count):
            t = settled[idx]
            if excess[t] >= -tol:
                continue
            s = root[t]
            if excess[s] <= tol:
                continue
            amount = min(excess[s], -excess[t])
            v = t
            while v != s:
                a = pred[v]
                if fwd[v]:
                    v = tail[a]
                else:
                    if flow[a] < amount:
                        amount = flow[a]
                    v = head[a]
            if amount <= 0.0:
                continue
            v = t
            while v != s:
                a = pred[v]
                if fwd[v]:
                    flow[a] += amount
                    v = tail[a]
                else:
                    if flow[a] == amount:
                        flow[a] = 0.0
                    else:
                        flow[a] -= amount
                    v = head[a]
            excess[s] -= amount
            excess[t] += amount
            pushed = True
        if not pushed:
            return flow, pi, 1


@njit(cache=True)
def _rebuild_tree(n_nodes, root, tree_arcs, tail, head, cost, parent, pred, depth, y):
    """Parent pointers, depths and potentials from the current basis (BFS from root)."""
    m = len(tree_arcs)
    ends = np.empty(2 * m, dtype=np.int64)
    for i in range(m):
        ends[2 * i] = tail[tree_arcs[i]]
        ends[2 * i + 1] = head[tree_arcs[i]]
    start, order = _csr(ends, n_nodes)
    queue = np.empty(n_nodes, dtype=np.int64)
    seen = np.zeros(n_nodes, dtype=np.bool_)
    queue[0] = root
    seen[root] = True
    parent[root] = -1
    pred[root] = -1
    depth[root] = 0
    y[root] = 0.0
    qh = 0
    qt = 1
    while qh < qt:
        u = queue[qh]
        qh += 1
        for k in range(start[u], start[u + 1]):
            a = tree_arcs[order[k] // 2]
            v = head[a] if tail[a] == u else tail[a]
            if seen[v]:
                continue
            seen[v] = True
            parent[v] = u
            pred[v] = a
            depth[v] = depth[u] + 1
            y[v] = y[u] + cost[a] if tail[a] == v else y[u] - cost[a]
            queue[qt] = v
            qt += 1


@njit(cache=True)
def _detach(v, parent, first_child, next_sib, prev_sib):
    if prev_sib[v] >= 0:
        next_sib[prev_sib[v]] = next_sib[v]
    else:
        first_child[parent[v]] = next_sib[v]
    if next_sib[v] >= 0:
        prev_sib[next_sib[v]] = prev_sib[v]
    parent[v] = -1


@njit(cache=True)
def _attach(v, new_parent, parent, first_child, next_sib, prev_sib):
    head_child = first_child[new_parent]
    next_sib[v] = head_child
    prev_sib[v] = -1
    if head_child >= 0:
        prev_sib[head_child] = v
    first_child[new_parent] = v
    parent[v] = new_parent


@njit(cache=True)
def _simplex_kernel(n, tail_in, head_in, cost_in, supply):
    """Primal network simplex with a big-M artificial root and strongly feasible bases.

    Returns (flow on the real arcs, potentials, status); status 1 means some
    artificial arc still carries flow, i.e. the demand is not routable.
    """
    m = len(tail_in)
    root = n
    total_arcs = m + n
    tail = np.empty(total_arcs, dtype=np.int64)
    head = np.empty(total_arcs, dtype=np.int64)
    cost = np.empty(total_arcs)
    flow = np.zeros(total_arcs)
    cmax = 0.0
    for a in range(m):
        tail[a] = tail_in[a]
        head[a] = head_in[a]
        cost[a] = cost_in[a]
        if cost_in[a] > cmax:
            cmax = cost_in[a]
    if cmax == 0.0:
        cmax = 1.0
    big = (n + 2) * cmax
    tree_arcs = np.empty(n, dtype=np.int64)
    slot = np.full(total_arcs, -1, dtype=np.int64)
    for i in range(n):
        a = m + i
        if supply[i] >= 0.0:
            tail[a] = i
            head[a] = root
            flow[a] = supply[i]
        else:
            tail[a] = root
            head[a] = i
            flow[a] = -supply[i]
        cost[a] = big
        tree_arcs[i] = a
        slot[a] = i
    parent = np.empty(n + 1, dtype=np.int64)
    pred = np.empty(n + 1, dtype=np.int64)
    depth = np.empty(n + 1, dtype=np.int64)
    y = np.empty(n + 1)
    _rebuild_tree(n + 1, root, tree_arcs, tail, head, cost, parent, pred, depth, y)
    first_child = np.full(n + 1, -1, dtype=np.int64)
    next_sib = np.full(n + 1, -1, dtype=np.int64)
    prev_sib = np.full(n + 1, -1, dtype=np.int64)
    for v in range(n):
        _attach(v, root, parent, first_child, next_sib, prev_sib)
    stack = np.empty(n + 1, dtype=np.int64)
    tol = 1e-12 * big
    block = max(int(np.sqrt(total_arcs)), 16)
    next_arc = 0
    path_p = np.empty(n + 1, dtype=np.int64)
    path_q = np.empty(n + 1, dtype=np.int64)
    while True:
        entering = -1
        best = -tol
        scanned = 0
        while scanned < total_arcs:
            stop = min(block, total_arcs - scanned)
            for _ in range(stop):
                a = next_arc
                next_arc += 1
                if next_arc == total_arcs:
                    next_arc = 0
                if slot[a] >= 0:
                    continue
                rc = cost[a] - y[tail[a]] + y[head[a]]
                if rc < best:
                    best = rc
                    entering = a
            scanned += stop
            if entering >= 0:
                break
        if entering < 0:
            break
        p = tail[entering]
        q = head[entering]
        u = p
        v = q
        n_p = 0
        n_q = 0
        while u != v:
            if depth[u] >= depth[v]:
                path_p[n_p] = u
                n_p += 1
                u = parent[u]
            else:
                path_q[n_q] = v
                n_q += 1
                v = parent[v]
        # last blocking arc along the cycle oriented join -> p -> q -> join
        theta = np.inf
        leave = -1
        for i in range(n_p - 1, -1, -1):
            w = path_p[i]
            a = pred[w]
            if tail[a] == w and flow[a] <= theta:
                theta = flow[a]
                leave = a
        for i in range(n_q):
            w = path_q[i]
            a = pred[w]
            if head[a] == w and flow[a] <= theta:
                theta = flow[a]
                leave = a
        if leave < 0:
            return flow[:m], y[:n], 2
        if theta > 0.0:
            for i in range(n_p):
                w = path_p[i]
                a = pred[w]
                if tail[a] == w:
                    flow[a] -= theta
                else:
                    flow[a] += theta
            for i in range(n_q):
                w = path_q[i]
                a = pred[w]
                if head[a] == w:
                    flow[a] -= theta
                else:
                    flow[a] += theta
            flow[entering] += theta
        flow[leave] = 0.0
        k = slot[leave]
        slot[leave] = -1
        tree_arcs[k] = entering
        slot[entering] = k
        # re-hang the subtree cut off by the leaving arc from the entering arc
        cut = tail[leave] if parent[tail[leave]] == head[leave] else head[leave]
        on_p_side = False
        for i in range(n_p):
            if path_p[i] == cut:
                on_p_side = True
        x = p if on_p_side else q
        z = q if on_p_side else p
        n_path = 0
        w = x
        while True:
            path_p[n_path] = w
            path_q[n_path] = pred[w]
            n_path += 1
            if w == cut:
                break
            w = parent[w]
        for i in range(n_path):
            _detach(path_p[i], parent, first_child, next_sib, prev_sib)
        _attach(x, z, parent, first_child, next_sib, prev_sib)
        pred[x] = entering
        for i in range(1, n_path):
            _attach(path_p[i], path_p[i - 1], parent, first_child, next_sib, prev_sib)
            pred[path_p[i]] = path_q[i - 1]
        stack[0] = x
        top = 1
        while top > 0:
            top -= 1
            u = stack[top]
            a = pred[u]
            pu = parent[u]
            depth[u] = depth[pu] + 1
            y[u] = y[pu] + cost[a] if tail[a] == u else y[pu] - cost[a]
            c = first_child[u]
            while c >= 0:
                stack[top] = c
                top += 1
                c = next_sib[c]
    scale = np.abs(supply).sum() + 1e-300
    for i in range(n):
        if flow[m + i] > 1e-9 * scale:
            return flow[:m], y[:n], 1
    return flow[:m], y[:n], 0


@njit(cache=True)
def _few_targets_kernel(cost, supply, demand, tol):
    """Successive shortest paths for a transport problem with few demand nodes.

    Sources are added one at a time. Shortest paths only need the demand
    ("hub") nodes: a hop hub b -> hub b2 moves some source currently assigned
    to b over to b2, and its cheapest price is kept in a lazy heap per ordered
    hub pair. Returns (flow matrix, hub potentials, status).
    """
    n_src, n_hub = cost.shape
    flow = np.zeros((n_src, n_hub))
    in_heap = np.zeros((n_src, n_hub), dtype=np.bool_)
    load = np.zeros(n_hub)
    pot = np.zeros(n_hub)
    heaps = [[(0.0, np.int64(0))] for _ in range(n_hub * n_hub)]
    for h in heaps:
        h.pop()
    label = np.empty(n_hub)
    parent = np.empty(n_hub, dtype=np.int64)
    via = np.empty(n_hub, dtype=np.int64)
    done = np.empty(n_hub, dtype=np.bool_)
    for c in range(n_src):
        remaining = supply[c]
        while remaining > tol:
            for b in range(n_hub):
                label[b] = cost[c, b] - pot[b]
                parent[b] = -1
                via[b] = -1
                done[b] = False
            for _ in range(n_hub):
                u = -1
                for b in range(n_hub):
                    if not done[b] and (u < 0 or label[b] < label[u]):
                        u = b
                done[u] = True
                for b in range(n_hub):
                    if done[b]:
                        continue
                    h = heaps[u * n_hub + b]
                    while len(h) > 0 and flow[h[0][1], u] <= tol:
                        in_heap[h[0][1], u] = False
                        heapq.heappop(h)
                    if len(h) == 0:
                        continue
                    cand = label[u] + h[0][0] + pot[u] - pot[b]
                    if cand < label[b]:
                        label[b] = cand
                        parent[b] = u
                        via[b] = h[0][1]
            target = -1
            best = np.inf
            for b in range(n_hub):
                if demand[b] - load[b] > tol and label[b] + pot[b] < best:
                    best = label[b] + pot[b]
                    target = b
            if target < 0:
                if remaining > 1e6 * tol:
                    return flow, pot, 1
                break
            amount = min(remaining, demand[target] - load[target])
            b = target
            while parent[b] >= 0:
                amount = min(amount, flow[via[b], parent[b]])
                b = parent[b]
            first = b
            b = target
            while parent[b] >= 0:
                moved = via[b]
                prev = parent[b]
                flow[moved, prev] -= amount
                if flow[moved, prev] <= tol:
                    flow[moved, prev] = 0.0
                flow[moved, b] += amount
                if not in_heap[moved, b]:
                    in_heap[moved, b] = True
                    for b2 in range(n_hub):
                        if b2 != b:
                            heapq.heappush(heaps[b * n_hub + b2], (cost[moved, b2] - cost[moved, b], moved))
                b = prev
            flow[c, first] += amount
            if not in_heap[c, first]:
                in_heap[c, first] = True
                for b2 in range(n_hub):
                    if b2 != first:
                        heapq.heappush(heaps[first * n_hub + b2], (cost[c, b2] - cost[c, first], np.int64(c)))
            load[target] += amount
            remaining -= amount
            for b in range(n_hub):
                pot[b] = label[b] + pot[b]
    return flow, pot, 0


def solve_mcf(n_vertices, tails, heads, costs, demand, method="ssp"):
    """Min-cost flow on directed uncapacitated arcs.

    ``demand`` is positive at supplies. Returns (flow per arc, y) with
    y(u) - y(v) <= cost(u, v) on every arc and equality where flow > 0.
    ``method`` is "ssp" (successive shortest paths) or "simplex" (network
    simplex, faster on sparse graphs with many terminals).
    """
    if method not in ("ssp", "simplex"):
        raise InputError(f"unknown min-cost flow method {method!r}")
    tails = np.ascontiguousarray(tails, dtype=np.int64)
    heads = np.ascontiguousarray(heads, dtype=np.int64)
    costs = np.ascontiguousarray(costs, dtype=float)
    demand = np.asarray(demand, dtype=float)
    if costs.size and (not np.all(np.isfinite(costs)) or costs.min() < 0):
        raise InputError("arc costs must be finite and non-negative")
    scale = np.abs(demand).sum() / 2
    if scale == 0:
        return np.zeros(len(tails)), np.zeros(n_vertices)
    if abs(demand.sum()) > MASS_RTOL * scale:
        raise InfeasibleError(f"unbalanced demand (sum {demand.sum():.3e})")
    if method == "simplex":
        flow, y, status = _simplex_kernel(n_vertices, tails, heads, costs, demand)
        if status == 2:
            raise InvariantViolation("network simplex found an unbounded cycle")
        if status:
            raise InfeasibleError("some demand is unreachable from the supplies")
        return flow, y
    excess = demand.copy()
    flow, pi, status = _ssp_kernel(n_vertices, tails, heads, costs, excess, 1e-14 * scale)
    if status:
        raise InfeasibleError("some demand is unreachable from the supplies")
    return flow, -pi


@dataclass
class GraphMCF:
    n_vertices: int
    tails: np.ndarray
    heads: np.ndarray
    costs: np.ndarray
    demand: np.ndarray


@dataclass
class FlowState:
    """Flow per directed arc and a dual weight per vertex."""

    flow: np.ndarray
    y: np.ndarray

    def cost(self, lengths):
        return float(np.dot(self.flow, lengths))


def mcf_exact(graph: GraphMCF) -> FlowState:
    flow, y = solve_mcf(graph.n_vertices, graph.tails, graph.heads, graph.costs, graph.demand)
    return FlowState(flow, y)


def mcf_certificate(graph: GraphMCF, state: FlowState, rtol=1e-9):
    """Worst conservation residual, dual violation and slackness gap (all absolute)."""
    net = np.bincount(graph.tails, state.flow, graph.n_vertices) - np.bincount(
        graph.heads, state.flow, graph.n_vertices
    )
    slack = graph.costs - (state.y[graph.tails] - state.y[graph.heads])
    support = state.flow > 0
    return {
        "conservation": float(np.abs(net - graph.demand).max(initial=0.0)),
        "dual_violation": float(max(0.0, -slack.min(initial=0.0))),
        "slackness_gap": float(np.abs(slack[support]).max(initial=0.0)),
    }


# ---------------------------------------------------------------- bipartite


def _forest_support(src, dst, mass, n_left):
    """Cancel zero-cost cycles on the support until it is a forest.

    Every support edge of an optimal plan is tight, so alternating cycles have
    zero cost and canceling them preserves optimality and complementary slackness.
    """
    order = np.argsort(-mass, kind="stable")
    parent = {}

    def find(u):
        while parent.setdefault(u, u) != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    adj = {}
    flows = {}

    def key(u, v):
        return (u, v) if u < v else (v, u)

    def path(a, b):
        prev = {a: None}
        queue = [a]
        for u in queue:
            if u == b:
                break
            for w in adj.get(u, ()):
                if w not in prev:
                    prev[w] = u
                    queue.append(w)
        out = [b]
        while prev[out[-1]] is not None:
            out.append(prev[out[-1]])
        return out[::-1]

    for k in order:
        u, v, f = int(src[k]), n_left + int(dst[k]), float(mass[k])
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[ru] = rv
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
            flows[key(u, v)] = f
            continue
        cycle = path(v, u)
        # the new edge (u, v) is decreased, then signs alternate along v..u
        minus = [key(cycle[i], cycle[i + 1]) for i in range(1, len(cycle) - 1, 2)]
        plus = [key(cycle[i], cycle[i + 1]) for i in range(0, len(cycle) - 1, 2)]
        theta = min([f] + [flows[e] for e in minus])
        for e in plus:
            flows[e] += theta
        f -= theta
        removed = None
        for e in minus:
            flows[e] -= theta
            if flows[e] <= 0 and removed is None:
                removed = e
        if f > 0 and removed is not None:
            a, b = removed
            adj[a].discard(b)
            adj[b].discard(a)
            del flows[removed]
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
            flows[key(u, v)] = f
    out_s, out_d, out_m = [], [], []
    for (a, b), f in flows.items():
        if f > 0:
            out_s.append(a)
            out_d.append(b - n_left)
            out_m.append(f)
    return np.array(out_s, np.int64), np.array(out_d, np.int64), np.array(out_m)


def _peel_forest(src, dst, n_left, supplies, demands):
    """Masses on a forest support fixed by the marginals, by repeated leaf elimination."""
    tail = np.asarray(src, dtype=np.int64)
    head = n_left + np.asarray(dst, dtype=np.int64)
    n = n_left + len(demands)
    remaining = np.r_[supplies, demands].astype(float)
    degree = np.bincount(np.r_[tail, head], minlength=n)
    incident = [[] for _ in range(n)]
    for e, (a, b) in enumerate(zip(tail.tolist(), head.tolist())):
        incident[a].append(e)
        incident[b].append(e)
    mass = np.zeros(len(tail))
    done = np.zeros(len(tail), dtype=bool)
    stack = [x for x in range(n) if degree[x] == 1]
    while stack:
        x = stack.pop()
        if degree[x] != 1:
            continue
        e = next(e for e in incident[x] if not done[e])
        done[e] = True
        other = head[e] if tail[e] == x else tail[e]
        mass[e] = remaining[x]
        remaining[other] -= remaining[x]
        remaining[x] = 0.0
        degree[x] -= 1
        degree[other] -= 1
        if degree[other] == 1:
            stack.append(other)
    return mass


def _finish_plan(src, dst, mass, supplies, demands, forest):
    """Reduce the support to a forest, fix its masses from the marginals, then repair drift."""
    m, k = len(supplies), len(demands)
    if forest:
        if len(mass) > m + k - 1:
            src, dst, mass = _forest_support(src, dst, mass, m)
        mass = _peel_forest(src, dst, m, supplies, demands)
        keep = mass > 0
        src, dst, mass = src[keep], dst[keep], mass[keep]
    plan = TransportPlan(src, dst, mass)
    rows, cols = plan.marginals(m, k)
    drift = max(np.abs(rows - supplies).max(), np.abs(cols - demands).max())
    if drift > 1e-13 * supplies.sum():
        plan = repair_marginals(plan, supplies, demands)
    return plan


def _pd_ot_few(cost, supplies, demands, forest):
    """pd_ot for m << k: the m supply nodes act as hubs of the few-targets kernel."""
    m, k = cost.shape
    many_cost = np.ascontiguousarray(cost.T)
    total = supplies.sum()
    flow, pot, status = _few_targets_kernel(many_cost, demands, supplies, 1e-15 * total)
    if status != 0:
        raise InfeasibleError("few-targets solver could not place all mass")
    y_many = (pot[None, :] - many_cost).max(axis=1)
    dst, src = np.nonzero(flow)
    plan = _finish_plan(src, dst, flow[dst, src], supplies, demands, forest)
    y_left, y_right = -pot, -y_many
    shift = y_right.min()
    return plan, y_left - shift, y_right - shift


def pd_ot(cost, supplies, demands, forest=True):
    """Exact discrete OT on a dense cost matrix.

    Returns (plan, y_left, y_right) with y_right[j] - y_left[i] <= cost[i, j],
    equality on the plan support, and min(y_right) = 0.
    """
    cost = np.asarray(cost, dtype=float)
    supplies = np.asarray(supplies, dtype=float)
    demands = np.asarray(demands, dtype=float)
    m, k = cost.shape
    if supplies.shape != (m,) or demands.shape != (k,):
        raise InputError("cost matrix and mass vectors disagree in shape")
    if np.any(supplies < 0) or np.any(demands < 0):
        raise InputError("negative mass")
    total = supplies.sum()
    if total <= 0 or abs(total - demands.sum()) > MASS_RTOL * max(total, demands.sum()):
        raise InfeasibleError("unbalanced transport instance")
    if m > k:
        plan, y_r, y_l = pd_ot(cost.T, demands, supplies, forest)
        plan = TransportPlan(plan.dst, plan.src, plan.mass)
        y_left, y_right = -y_l, -y_r
        shift = y_right.min()
        return plan, y_left - shift, y_right - shift
    if m <= FEW_TARGETS and k >= 4 * m:
        return _pd_ot_few(cost, supplies, demands * (total / demands.sum()), forest)
    tails = np.repeat(np.arange(m), k)
    heads = m + np.tile(np.arange(k), m)
    demand = np.concatenate([supplies, -demands * (total / demands.sum())])
    flow, y = solve_mcf(m + k, tails, heads, cost.reshape(-1), demand)
    potential = -y
    pos = flow > 0
    plan = _finish_plan(tails[pos], heads[pos] - m, flow[pos], supplies,
                        demands * (total / demands.sum()), forest)
    y_left, y_right = potential[:m], potential[m:]
    shift = y_right.min()
    return plan, y_left - shift, y_right - shift


def dual_certificate(cost, plan, y_left, y_right, min_mass_rtol=1e-12):
    """Max violation of y_r - y_l <= c over all pairs, and max |slack| on the support.

    Entries lighter than ``min_mass_rtol`` times the plan mass are rounding
    leftovers from the marginal repair and are not counted as support.
    """
    slack = np.asarray(cost) - (y_right[None, :] - y_left[:, None])
    heavy = plan.mass > min_mass_rtol * plan.mass.sum()
    on_support = slack[plan.src[heavy], plan.dst[heavy]]
    return float(max(0.0, -slack.min())), float(np.abs(on_support).max(initial=0.0))


def exact_ot_euclidean(mu, nu):
    """Optimal Euclidean plan between two discrete measures and its cost."""
    if mu.dim != nu.dim:
        raise InputError("dimension mismatch")
    cost = cdist(mu.points, nu.points)
    plan, y_left, y_right = pd_ot(cost, mu.masses, nu.masses)
    viol, gap = dual_certificate(cost, plan, y_left, y_right)
    tol = 1e-7 * max(cost.max(), 1e-300)
    if viol > tol or gap > tol:
        raise InvariantViolation(f"exact solve certificate failed ({viol:.2e}, {gap:.2e})")
    plan.evaluate(mu.points, nu.points)
    return plan, plan.cost
