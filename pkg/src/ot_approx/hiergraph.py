"""Randomly shifted hierarchical grid and the spanner graph built on it.

Each cell carries a set of local vertices (its center, its children's centers
and its non-empty subcell centers; a leaf holds its input points instead of
children). A (1+eps)-spanner on the local vertices gives the greedy edges, and
a spanner on the subcell centers of all children gives the shortcut edges.

Grid sizes are chosen so that no two Steiner vertices ever coincide: the child
grid per axis is a power of two (at least 4) and the subcell grid per axis is
twice an odd number. Cell centers at depth k then sit at odd multiples of
side/(2K) with K the product of child counts, and the 2-adic valuations of
these denominators are distinct across depths and roles.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .errors import InputError

INPUT, CENTER, SUBCELL = 0, 1, 2
GREEDY, SHORTCUT = 0, 1


@dataclass
class HierCell:
    id: int
    level: int
    lo: np.ndarray
    side: float
    parent: int
    children: list = field(default_factory=list)
    points: np.ndarray = None
    subcells: np.ndarray = None

    @property
    def center(self):
        return self.lo + 0.5 * self.side

    @property
    def n_points(self):
        return len(self.points)

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class HierTree:
    cells: list
    points: np.ndarray
    eps: float
    seed: int
    shift: np.ndarray
    leaf_threshold: float
    height: int
    subcell_divisions: int

    @property
    def dim(self):
        return self.points.shape[1]


def loglog(n):
    return math.log2(math.log2(max(n, 4)))


def leaf_threshold(n, d, eps):
    """Leaf size bound, capped for desk-scale n so the tree has at least two levels."""
    tau = (loglog(n) / eps) ** (3 * d)
    if tau >= n:
        tau = max(64.0, n / 4.0)
    return tau


def child_divisions(n_cell, d):
    """Power of two >= max(4, n^(1/(3d))): the child grid per axis."""
    need = max(4, math.ceil(n_cell ** (1.0 / (3 * d)) - 1e-9))
    return 1 << (need - 1).bit_length()


def subcell_divisions(d, height, eps):
    """Smallest k >= 4dh/eps with k = 2 (mod 4)."""
    k = math.ceil(4 * d * height / eps - 1e-9)
    while k % 4 != 2:
        k += 1
    return k


def grid_index(points, lo, step, k):
    """Cell index per axis; boundary points go to the lower cell."""
    idx = np.ceil((points - lo) / step).astype(np.int64) - 1
    return np.clip(idx, 0, k - 1)


def build_tree(points, eps, seed=0, threshold=None, _attempts=8):
    """Hierarchical partition of distinct points inside a randomly shifted root cell."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise InputError("need at least two points")
    n, d = pts.shape
    origin = pts.min(axis=0)
    extent = float((pts.max(axis=0) - origin).max())
    if extent <= 0:
        raise InputError("degenerate input: all points identical")
    if len(np.unique(pts, axis=0)) != n:
        raise InputError("input points must be distinct")
    tau = leaf_threshold(n, d, eps) if threshold is None else float(threshold)
    rng = np.random.default_rng(seed)
    for _ in range(_attempts):
        shift = rng.uniform(0.0, extent, size=d)
        tree = _partition(pts, origin - shift, 2.0 * extent, tau, eps, seed, shift)
        if not _has_coincident_vertices(tree):
            return tree
    raise InputError("could not find a shift without coincident vertices")


def _partition(pts, root_lo, root_side, tau, eps, seed, shift):
    d = pts.shape[1]
    cells = [HierCell(0, 0, root_lo, root_side, -1, points=np.arange(len(pts)))]
    queue = [0]
    for cid in queue:
        cell = cells[cid]
        if cell.n_points <= tau:
            continue
        k = child_divisions(cell.n_points, d)
        step = cell.side / k
        idx = grid_index(pts[cell.points], cell.lo, step, k)
        keys, inverse = np.unique(idx, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        for j, key in enumerate(keys):
            child = HierCell(
                len(cells), cell.level + 1, cell.lo + key * step, step, cid,
                points=cell.points[inverse == j],
            )
            cell.children.append(child.id)
            cells.append(child)
            queue.append(child.id)
    height = max(c.level for c in cells) + 1
    ksub = subcell_divisions(d, height, eps)
    for cell in cells:
        if cell.is_leaf and cell.parent < 0:
            cell.subcells = np.zeros((0, d))
            continue
        step = cell.side / ksub
        idx = np.unique(grid_index(pts[cell.points], cell.lo, step, ksub), axis=0)
        cell.subcells = cell.lo + (idx + 0.5) * step
    return HierTree(cells, pts, eps, seed, shift, tau, height, ksub)


def _vertex_coords(tree):
    parts = [tree.points, np.array([c.center for c in tree.cells])]
    parts += [c.subcells for c in tree.cells]
    return np.vstack(parts)


def _has_coincident_vertices(tree):
    coords = _vertex_coords(tree)
    tol = 1e-12 * tree.cells[0].side
    return bool(cKDTree(coords).query_pairs(tol))


# ---------------------------------------------------------------- spanner


@njit(cache=True)
def _greedy_spanner(pts, stretch):
    m = pts.shape[0]
    npairs = m * (m - 1) // 2
    pu = np.empty(npairs, dtype=np.int64)
    pv = np.empty(npairs, dtype=np.int64)
    plen = np.empty(npairs)
    k = 0
    for i in range(m):
        for j in range(i + 1, m):
            pu[k] = i
            pv[k] = j
            plen[k] = np.sqrt(np.sum((pts[i] - pts[j]) ** 2))
            k += 1
    order = np.argsort(plen, kind="mergesort")
    known = np.full((m, m), np.inf)
    for i in range(m):
        known[i, i] = 0.0
    cap = 8
    nbr = np.empty((m, cap), dtype=np.int64)
    wts = np.empty((m, cap))
    deg = np.zeros(m, dtype=np.int64)
    eu = np.empty(npairs, dtype=np.int64)
    ev = np.empty(npairs, dtype=np.int64)
    ne = 0
    dist = np.empty(m)
    done = np.zeros(m, dtype=np.bool_)
    for idx in order:
        u, v, length = pu[idx], pv[idx], plen[idx]
        bound = stretch * length * (1.0 + 1e-12)
        if known[u, v] <= bound:
            continue
        # refresh the distance row of u with a full Dijkstra
        for x in range(m):
            dist[x] = np.inf
            done[x] = False
        dist[u] = 0.0
        heap = [(0.0, u)]
        while len(heap) > 0:
            d0, x = heapq.heappop(heap)
            if done[x]:
                continue
            done[x] = True
            for q in range(deg[x]):
                w = nbr[x, q]
                nd = d0 + wts[x, q]
                if nd < dist[w]:
                    dist[w] = nd
                    heapq.heappush(heap, (nd, w))
        for x in range(m):
            known[u, x] = dist[x]
            known[x, u] = dist[x]
        if known[u, v] <= bound:
            continue
        for a, b in ((u, v), (v, u)):
            if deg[a] == cap:
                cap *= 2
                nbr2 = np.empty((m, cap), dtype=np.int64)
                wts2 = np.empty((m, cap))
                nbr2[:, : cap // 2] = nbr
                wts2[:, : cap // 2] = wts
                nbr, wts = nbr2, wts2
            nbr[a, deg[a]] = b
            wts[a, deg[a]] = length
            deg[a] += 1
        known[u, v] = length
        known[v, u] = length
        eu[ne] = u
        ev[ne] = v
        ne += 1
    return eu[:ne], ev[:ne]


def euclidean_spanner(pts, eps):
    """Path-greedy (1+eps)-spanner; returns (u, v) index arrays."""
    pts = np.ascontiguousarray(pts, dtype=float)
    if len(pts) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return _greedy_spanner(pts, 1.0 + eps)


# ---------------------------------------------------------------- graph


@dataclass
class SpannerGraph:
    coords: np.ndarray
    kind: np.ndarray
    owner: np.ndarray
    eu: np.ndarray
    ev: np.ndarray
    length: np.ndarray
    edge_kind: np.ndarray
    edge_cell: np.ndarray
    n_input: int
    center_vertex: np.ndarray
    local_vertices: list
    local_edges: list
    _csr: csr_matrix = None

    @property
    def n_vertices(self):
        return len(self.coords)

    @property
    def n_edges(self):
        return len(self.eu)

    @property
    def adjacency(self):
        if self._csr is None:
            n = self.n_vertices
            self._csr = csr_matrix(
                (np.r_[self.length, self.length], (np.r_[self.eu, self.ev], np.r_[self.ev, self.eu])),
                shape=(n, n),
            )
        return self._csr

    def degrees(self):
        return np.bincount(np.r_[self.eu, self.ev], minlength=self.n_vertices)

    def distances_from(self, sources):
        return dijkstra(self.adjacency, directed=False, indices=sources)

    def dump_edges(self, path):
        names = {GREEDY: "greedy", SHORTCUT: "shortcut"}
        with open(path, "w") as fh:
            fh.write("u,v,length,kind\n")
            for u, v, ln, k in zip(self.eu, self.ev, self.length, self.edge_kind):
                fh.write(f"{int(u)},{int(v)},{float(ln)!r},{names[int(k)]}\n")


def build_graph(tree, eps=None):
    """Greedy and shortcut edges over input points, cell centers and subcell centers."""
    eps = tree.eps if eps is None else eps
    cells = tree.cells
    n_in = len(tree.points)
    d = tree.dim
    coords = [tree.points]
    kind = [np.full(n_in, INPUT, np.int8)]
    owner = [np.zeros(n_in, np.int64)]
    center_vertex = n_in + np.arange(len(cells))
    coords.append(np.array([c.center for c in cells]).reshape(-1, d))
    kind.append(np.full(len(cells), CENTER, np.int8))
    owner.append(np.arange(len(cells)))
    sub_vertices = []
    nxt = n_in + len(cells)
    for c in cells:
        ids = nxt + np.arange(len(c.subcells))
        nxt += len(c.subcells)
        sub_vertices.append(ids)
        coords.append(c.subcells.reshape(-1, d))
        kind.append(np.full(len(ids), SUBCELL, np.int8))
        owner.append(np.full(len(ids), c.id))
    coords = np.vstack(coords)
    kind = np.concatenate(kind)
    owner = np.concatenate(owner)
    for c in cells:
        if c.is_leaf:
            owner[c.points] = c.id

    eu, ev, ekind, ecell = [], [], [], []
    local_vertices, local_edges = [], []
    seen = set()
    count = 0
    for c in cells:
        if c.is_leaf:
            members = np.r_[center_vertex[c.id], c.points, sub_vertices[c.id]]
        else:
            members = np.r_[center_vertex[c.id], center_vertex[c.children], sub_vertices[c.id]]
        members = members.astype(np.int64)
        local_vertices.append(members)
        a, b = euclidean_spanner(coords[members], eps)
        u, v = members[a], members[b]
        local_edges.append(count + np.arange(len(u)))
        count += len(u)
        eu.append(u)
        ev.append(v)
        ekind.append(np.full(len(u), GREEDY, np.int8))
        ecell.append(np.full(len(u), c.id))
        seen.update(zip(np.minimum(u, v).tolist(), np.maximum(u, v).tolist()))
    for c in cells:
        if c.is_leaf:
            continue
        members = np.concatenate([sub_vertices[ch] for ch in c.children]).astype(np.int64)
        a, b = euclidean_spanner(coords[members], eps)
        u, v = members[a], members[b]
        fresh = np.array(
            [(x, y) not in seen for x, y in zip(np.minimum(u, v).tolist(), np.maximum(u, v).tolist())],
            dtype=bool,
        ).reshape(-1)
        u, v = u[fresh], v[fresh]
        count += len(u)
        eu.append(u)
        ev.append(v)
        ekind.append(np.full(len(u), SHORTCUT, np.int8))
        ecell.append(np.full(len(u), c.id))
    eu = np.concatenate(eu).astype(np.int64)
    ev = np.concatenate(ev).astype(np.int64)
    length = np.linalg.norm(coords[eu] - coords[ev], axis=1)
    return SpannerGraph(
        coords, kind, owner, eu, ev, length, np.concatenate(ekind), np.concatenate(ecell),
        n_in, center_vertex, local_vertices, local_edges,
    )


def stretch_stats(points, eps, seeds, pairs):
    """Stretch of sampled input pairs across independently shifted graphs.

    Returns (min, mean, max) over all (pair, seed) samples together with the
    per-pair mean over seeds.
    """
    pts = np.asarray(points, dtype=float)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    euclid = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    sources, inverse = np.unique(pairs[:, 0], return_inverse=True)
    ratios = np.empty((len(seeds), len(pairs)))
    for row, seed in enumerate(seeds):
        graph = build_graph(build_tree(pts, eps, seed))
        dist = graph.distances_from(sources)
        ratios[row] = dist[inverse, pairs[:, 1]] / euclid
    per_pair = ratios.mean(axis=0)
    return {
        "min": float(ratios.min()),
        "mean": float(ratios.mean()),
        "max": float(ratios.max()),
        "max_pair_mean": float(per_pair.max()),
        "per_pair_mean": per_pair,
        "lower_violations": int(np.sum(ratios < 1.0 - 1e-9)),
    }
