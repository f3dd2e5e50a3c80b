"""Additive cost scaling for semi-discrete transport on the line under |x - b|.

Each scale builds, from the current target weights y, the i-expanded weighted
Voronoi cells V_b^i (intervals), overlays them into an arrangement of
intervals, collapses the density to one representative per interval, solves
the resulting discrete instance exactly on integer costs d_delta in
{0, ..., 4n+1}, and moves the weights by delta times the integer duals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError, InputError, InvariantViolation
from .exact import pd_ot
from .measures import MASS_RTOL, PiecewiseUniform1D

INT_TOL = 1e-9
# plan entries lighter than this fraction of the total are rounding leftovers
SUPPORT_RTOL = 1e-12


def _targets_1d(nu):
    pts = np.asarray(nu.points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 1:
        raise InputError("scaling1d needs one-dimensional targets")
    return pts[:, 0]


def _check_oracle(oracle):
    if not isinstance(oracle, PiecewiseUniform1D):
        raise InputError("scaling1d needs a one-dimensional piecewise-uniform oracle")


# ---------------------------------------------------------------- weighted cells


def weighted_cell_1d(targets, weights, b, support=None):
    """Interval where |x - targets[b]| - weights[b] attains the lower envelope.

    Returns (lo, hi); the cell is empty when lo > hi. With a ``support``
    interval the cell is clipped to it.
    """
    targets = np.asarray(targets, dtype=float)
    weights = np.asarray(weights, dtype=float)
    lo, hi = -np.inf, np.inf
    for other in range(len(targets)):
        if other == b:
            continue
        length = abs(targets[b] - targets[other])
        lift = weights[b] - weights[other]
        if lift >= length:
            continue
        if lift < -length:
            return np.inf, -np.inf
        bisector_shift = targets[b] + targets[other]
        if targets[b] < targets[other]:
            hi = min(hi, 0.5 * (bisector_shift + lift))
        else:
            lo = max(lo, 0.5 * (bisector_shift - lift))
    if support is not None:
        lo, hi = max(lo, support[0]), min(hi, support[1])
    return lo, hi


@dataclass
class Expansions:
    """V_b^i for i = 1..levels as arrays lo[b, i-1], hi[b, i-1] (empty when lo > hi)."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def levels(self):
        return self.lo.shape[1]

    def nonempty(self):
        return self.lo <= self.hi

    def contains(self, x):
        """(n, levels, len(x)) membership of points x in every V_b^i."""
        x = np.asarray(x, dtype=float)
        return (self.lo[..., None] <= x) & (x <= self.hi[..., None])


def build_expansions(targets, y, delta, support=None, levels=None):
    """Cells V_b^i with weight y(b) + i*delta for b and y elsewhere, i = 1..4n+1."""
    targets = np.asarray(targets, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(targets)
    levels = 4 * n + 1 if levels is None else levels
    steps = delta * np.arange(1, levels + 1)
    lo = np.full((n, levels), -np.inf)
    hi = np.full((n, levels), np.inf)
    empty = np.zeros((n, levels), dtype=bool)
    for b in range(n):
        others = np.arange(n) != b
        tb, to = targets[b], targets[others]
        length = np.abs(tb - to)[:, None]
        lift = (y[b] + steps)[None, :] - y[others][:, None]
        active = lift < length
        empty[b] = np.any(lift < -length, axis=0)
        bound_hi = np.where(active & (to > tb)[:, None], 0.5 * (tb + to[:, None] + lift), np.inf)
        bound_lo = np.where(active & (to < tb)[:, None], 0.5 * (tb + to[:, None] - lift), -np.inf)
        if len(to):
            hi[b] = bound_hi.min(axis=0)
            lo[b] = bound_lo.max(axis=0)
    if support is not None:
        lo = np.maximum(lo, support[0])
        hi = np.minimum(hi, support[1])
    lo[empty] = np.inf
    hi[empty] = -np.inf
    exp = Expansions(lo, hi)
    check_nesting(exp)
    return exp


def check_nesting(exp):
    """Raise unless V_b^1 is contained in V_b^2 ... for every b."""
    ok = exp.nonempty()
    if np.any(ok[:, :-1] & ~ok[:, 1:]):
        raise InvariantViolation("a nonempty expansion is followed by an empty one")
    both = ok[:, :-1] & ok[:, 1:]
    shrink = (exp.lo[:, 1:] > exp.lo[:, :-1]) | (exp.hi[:, 1:] < exp.hi[:, :-1])
    if np.any(both & shrink):
        raise InvariantViolation("expansion intervals are not nested")


# ---------------------------------------------------------------- arrangement


@dataclass
class Arrangement:
    """Intervals [edges[k], edges[k+1]] between consecutive expansion endpoints."""

    edges: np.ndarray
    masses: np.ndarray

    @property
    def reps(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def left(self):
        return self.edges[:-1]

    @property
    def right(self):
        return self.edges[1:]

    def __len__(self):
        return len(self.masses)


def build_arrangement(exp, oracle):
    """Overlay of all expansion endpoints inside the oracle's support."""
    s_lo, s_hi = oracle.support
    ok = exp.nonempty()
    ends = np.r_[exp.lo[ok], exp.hi[ok]]
    ends = ends[np.isfinite(ends) & (ends > s_lo) & (ends < s_hi)]
    edges = np.unique(np.r_[s_lo, ends, s_hi])
    masses = oracle.interval_mass(edges[:-1], edges[1:])
    return Arrangement(edges, masses)


def discrete_costs(exp, reps):
    """d_delta(r, b): 0 in V_b^1, i in V_b^{i+1} minus V_b^i, and 4n+1 outside all."""
    inside = exp.contains(reps)
    levels = exp.levels
    first = np.where(inside.any(axis=1), inside.argmax(axis=1), levels)
    return first.T.astype(np.int64)


def discrete_costs_direct(targets, y, delta, reps, levels):
    """The same costs from the weighted-distance gap to the closest competitor."""
    targets = np.asarray(targets, dtype=float)
    reps = np.asarray(reps, dtype=float)
    weighted = np.abs(reps[:, None] - targets[None, :]) - np.asarray(y)[None, :]
    n = len(targets)
    out = np.empty((len(reps), n), dtype=np.int64)
    for b in range(n):
        others = np.delete(weighted, b, axis=1)
        if others.shape[1] == 0:
            out[:, b] = 0
            continue
        gap = weighted[:, b] - others.min(axis=1)
        first = np.maximum(1, np.ceil(gap / delta)).astype(np.int64)
        out[:, b] = np.minimum(first - 1, levels)
    return out


def slack_units(targets, y, delta, x):
    """floor(s / delta) for the slack of every (x, b): excess weighted distance over the WNN."""
    weighted = np.abs(np.asarray(x)[:, None] - np.asarray(targets)[None, :]) - np.asarray(y)[None, :]
    excess = weighted - weighted.min(axis=1, keepdims=True)
    return np.floor(excess / delta).astype(np.int64)


# ---------------------------------------------------------------- scales


@dataclass
class ScaleRecord:
    delta: float
    n_cells: int
    max_support_cost: int
    carried_max_cost: int | None
    cost: float


@dataclass
class ScalingState1D:
    """Weights y at the start of the scale ``delta`` plus the last scale's outputs."""

    targets: np.ndarray
    demand: np.ndarray
    y: np.ndarray
    delta: float
    arrangement: Arrangement | None = None
    expansions: Expansions | None = None
    costs: np.ndarray | None = None
    plan: tuple | None = None
    last_delta: float | None = None
    history: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.targets)


def carry_plan(old, plan, new, oracle):
    """Spread a plan on old cells proportionally onto the cells of a new arrangement.

    Returns (new cell ids, target ids, masses).
    """
    cell, target, mass = plan
    keep = mass > 0
    cell, target, mass = cell[keep], target[keep], mass[keep]
    left = np.maximum(old.left[cell][:, None], new.left[None, :])
    right = np.minimum(old.right[cell][:, None], new.right[None, :])
    rows, cols = np.nonzero(right > left)
    share = oracle.interval_mass(left[rows, cols], right[rows, cols])
    base = old.masses[cell[rows]]
    moved = mass[rows] * np.divide(share, base, out=np.zeros(len(rows)), where=base > 0)
    return cols, target[rows], moved


def plan_cost(oracle, arrangement, targets, plan):
    """Cost of the proportional lift of a cell-level plan."""
    cell, target, mass = plan
    cell_mass = arrangement.masses[cell]
    moment = oracle.abs_moment(arrangement.left[cell], arrangement.right[cell], targets[target])
    ratio = np.divide(mass, cell_mass, out=np.zeros(len(mass)), where=cell_mass > 0)
    return float(np.dot(ratio, moment))


def scale_step(state, oracle):
    """Run one scale in place and return the state (weights updated, delta halved)."""
    n = state.n
    levels = 4 * n + 1
    total = float(oracle.total)
    exp = build_expansions(state.targets, state.y, state.delta, oracle.support, levels)
    arr = build_arrangement(exp, oracle)
    if len(arr) > 2 * n * levels + 1:
        raise InvariantViolation("arrangement has more cells than endpoints allow")
    costs = discrete_costs(exp, arr.reps)
    carried_max = None
    if state.plan is not None:
        cols, tgt, moved = carry_plan(state.arrangement, state.plan, arr, oracle)
        heavy = moved > SUPPORT_RTOL * total
        cols, tgt = cols[heavy], tgt[heavy]
        carried_max = int(costs[cols, tgt].max(initial=0))
        if carried_max > 4:
            raise InvariantViolation(f"carried plan uses cost {carried_max} > 4 at delta={state.delta}")
    plan, _, y_hat = pd_ot(costs.astype(float), arr.masses, state.demand)
    heavy = plan.mass > SUPPORT_RTOL * total
    support_max = int(costs[plan.src[heavy], plan.dst[heavy]].max(initial=0))
    if support_max > 4 * n:
        raise InvariantViolation(f"optimal plan uses cost 4n+1 at delta={state.delta}")
    rounded = np.round(y_hat)
    if np.abs(y_hat - rounded).max(initial=0.0) > INT_TOL:
        raise InvariantViolation("discrete duals are not integral")
    cell_plan = (plan.src, plan.dst, plan.mass)
    cost = plan_cost(oracle, arr, state.targets, cell_plan)
    state.history.append(ScaleRecord(state.delta, len(arr), support_max, carried_max, cost))
    state.y = state.y + state.delta * rounded
    state.arrangement, state.expansions, state.costs = arr, exp, costs
    state.plan = cell_plan
    state.last_delta = state.delta
    state.delta = state.delta / 2.0
    return state


def scale_count(n, diameter, eps, duals_mode=False):
    """ceil(log2(diameter/eps)) scales, or ceil(log2(5 n diameter/eps)) for accurate duals; at least 1."""
    ratio = (5.0 * n if duals_mode else 1.0) * diameter / eps
    return max(1, int(math.ceil(math.log2(ratio)))) if ratio > 1 else 1


@dataclass
class ScalingResult:
    cost: float
    duals: np.ndarray
    scales: int
    final_delta: float
    state: ScalingState1D

    @property
    def plan(self):
        return self.state.plan

    @property
    def arrangement(self):
        return self.state.arrangement

    def plan_entries(self):
        """Rows (cell left, cell right, target id, mass) of the final plan."""
        cell, target, mass = self.state.plan
        arr = self.state.arrangement
        return np.c_[arr.left[cell], arr.right[cell], target, mass]

    def duals_dict(self):
        return {str(b): float(v) for b, v in enumerate(self.duals)}

    def to_dict(self):
        return {
            "cost": float(self.cost),
            "scales": int(self.scales),
            "final_delta": float(self.final_delta),
            "duals": self.duals_dict(),
            "targets": self.state.targets.tolist(),
            "plan": [[float(l), float(r), int(b), float(m)] for l, r, b, m in self.plan_entries()],
            "history": [
                {"delta": h.delta, "cells": h.n_cells, "max_support_cost": h.max_support_cost,
                 "carried_max_cost": h.carried_max_cost, "cost": h.cost}
                for h in self.state.history
            ],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def save_duals(self, path):
        with open(path, "w") as fh:
            json.dump(self.duals_dict(), fh)


def diameter_1d(oracle, targets):
    s_lo, s_hi = oracle.support
    lo = min(s_lo, float(targets.min()))
    hi = max(s_hi, float(targets.max()))
    return hi - lo


def run_scaling(oracle, nu, eps, duals_mode=False):
    """eps-close plan (and, in duals mode, eps-accurate target weights) by cost scaling."""
    _check_oracle(oracle)
    if not eps > 0 or not math.isfinite(eps):
        raise InputError("eps must be a positive number")
    targets = _targets_1d(nu)
    if len(np.unique(targets)) != len(targets):
        raise InputError("targets must be distinct")
    total = float(oracle.total)
    if abs(total - nu.total) > MASS_RTOL * max(total, nu.total):
        raise InfeasibleError(f"unbalanced totals {float(total)!r} vs {float(nu.total)!r}")
    demand = np.asarray(nu.masses, dtype=float) * (total / nu.total)
    diameter = diameter_1d(oracle, targets)
    scales = scale_count(len(targets), diameter, eps, duals_mode)
    state = ScalingState1D(targets, demand, np.zeros(len(targets)), diameter)
    for _ in range(scales):
        scale_step(state, oracle)
    cost = state.history[-1].cost
    return ScalingResult(cost, state.y.copy(), scales, state.last_delta, state)


# ---------------------------------------------------------------- checks and references


@dataclass
class DeltaOptimalReport:
    samples: int
    violations: int
    worst_excess: float
    witnesses: list

    @property
    def ok(self):
        return self.violations == 0


def sample_plan_points(oracle, arrangement, plan, samples, rng):
    """Points drawn from the lifted plan: (x, target) pairs."""
    cell, target, mass = plan
    keep = mass > 0
    cell, target, mass = cell[keep], target[keep], mass[keep]
    pick = rng.choice(len(mass), size=samples, p=mass / mass.sum())
    left, right = arrangement.left[cell[pick]], arrangement.right[cell[pick]]
    # sample the density restricted to the cell: pick a piece by its mass inside the cell
    lo, hi = oracle.lows[:, 0], oracle.highs[:, 0]
    a = np.maximum(left[:, None], lo)
    b = np.minimum(right[:, None], hi)
    piece_mass = np.clip(b - a, 0.0, None) / (hi - lo) * oracle.weights
    cum = np.cumsum(piece_mass, axis=1)
    u = rng.random(samples) * cum[:, -1]
    piece = (cum < u[:, None]).sum(axis=1)
    piece = np.minimum(piece, len(lo) - 1)
    rows = np.arange(samples)
    x = a[rows, piece] + rng.random(samples) * (b[rows, piece] - a[rows, piece])
    return x, target[pick]


def check_delta_optimal(targets, y, oracle, arrangement, plan, delta, samples=10_000, seed=0):
    """Sampled delta-WNN audit: every support point's target is within delta of its weighted NN."""
    rng = np.random.default_rng(seed)
    targets = np.asarray(targets, dtype=float)
    x, tgt = sample_plan_points(oracle, arrangement, plan, samples, rng)
    weighted = np.abs(x[:, None] - targets[None, :]) - np.asarray(y)[None, :]
    excess = weighted[np.arange(samples), tgt] - weighted.min(axis=1) - delta
    bad = np.flatnonzero(excess > 1e-9)
    witnesses = [
        {"x": float(x[k]), "target": int(tgt[k]), "excess": float(excess[k])} for k in bad[:10]
    ]
    return DeltaOptimalReport(samples, len(bad), float(excess.max(initial=-np.inf)), witnesses)


def w1_closed_form(oracle, nu):
    """Exact 1-D cost: integral of |F_mu - F_nu| for a piecewise-uniform mu."""
    _check_oracle(oracle)
    targets = _targets_1d(nu)
    masses = np.asarray(nu.masses, dtype=float) * (oracle.total / nu.total)
    order = np.argsort(targets)
    t, m = targets[order], masses[order]
    knots = np.unique(np.r_[oracle.lows[:, 0], oracle.highs[:, 0], t])
    f_mu = oracle.cdf(knots)
    # F_nu is right-continuous; on (k_j, k_{j+1}) it equals its value at k_j
    f_nu = np.searchsorted(t, knots, side="right")
    f_nu = np.r_[0.0, np.cumsum(m)][f_nu]
    g0 = f_mu[:-1] - f_nu[:-1]
    g1 = f_mu[1:] - f_nu[:-1]
    width = np.diff(knots)
    same = g0 * g1 >= 0
    area = np.where(same, 0.5 * np.abs(g0 + g1) * width, 0.0)
    cross = ~same
    root = g0[cross] / (g0[cross] - g1[cross])
    area[cross] = 0.5 * width[cross] * (np.abs(g0[cross]) * root + np.abs(g1[cross]) * (1 - root))
    return float(area.sum())
