"""Well-separated pair decomposition on a fair-split tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass
class SplitNode:
    indices: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    left: "SplitNode | None" = None
    right: "SplitNode | None" = None

    @property
    def diag(self):
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def rep(self):
        return int(self.indices.min())

    @property
    def is_leaf(self):
        return self.left is None


@dataclass
class WspdPair:
    first: SplitNode
    second: SplitNode
    rep_first: int
    rep_second: int
    s: float


def fair_split_tree(points):
    """Split the bounding box through the middle of its widest side until singletons."""
    pts = np.asarray(points, dtype=float)

    def build(idx):
        sub = pts[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        node = SplitNode(idx, lo, hi)
        if len(idx) > 1:
            axis = int(np.argmax(hi - lo))
            cut = 0.5 * (lo[axis] + hi[axis])
            mask = sub[:, axis] <= cut
            node.left = build(idx[mask])
            node.right = build(idx[~mask])
        return node

    return build(np.arange(len(pts)))


def _box_distance(a, b):
    gap = np.maximum(0.0, np.maximum(a.lo - b.hi, b.lo - a.hi))
    return float(np.linalg.norm(gap))


def well_separated(a, b, s):
    """Bounding-box test: max(diam) <= s * (lower bound on the min distance)."""
    return max(a.diag, b.diag) <= s * _box_distance(a, b)


def build_wspd(points, s):
    """Pairs of split-tree nodes covering every unordered point pair exactly once."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise InputError("points must be a (n, d) array")
    if s <= 0:
        raise InputError("separation must be positive")
    if len(np.unique(pts, axis=0)) != len(pts) or len(pts) < 2:
        raise InputError("need at least two distinct points and no duplicates")
    root = fair_split_tree(pts)
    pairs = []
    stack = []

    def push_children(node):
        if not node.is_leaf:
            stack.append((node.left, node.right))
            push_children(node.left)
            push_children(node.right)

    push_children(root)
    while stack:
        a, b = stack.pop()
        if well_separated(a, b, s):
            pairs.append(WspdPair(a, b, a.rep, b.rep, s))
        elif a.diag >= b.diag and not a.is_leaf:
            stack.append((a.left, b))
            stack.append((a.right, b))
        else:
            stack.append((a, b.left))
            stack.append((a, b.right))
    return pairs
