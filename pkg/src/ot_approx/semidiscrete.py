"""Semi-discrete (1+eps)-approximate transport from a box-mass oracle to a point set.

Pipeline: a dyadic hypercube family over an enclosing cube H whose resolution
follows rings around WSPD pair representatives; greedy routing of the mass of
cubes that sit in a small neighborhood of a target; collapse of the remaining
mass to cube centers (plus one witness point for mass outside H); a discrete
solve; and a lift that spreads each cube's transported mass over the cube.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist, pdist

from .errors import InfeasibleError, InputError, InvariantViolation
from .exact import pd_ot
from .measures import MASS_RTOL, DiscreteMeasure, UniformBoxMixture, clamp_eps
from .wspd import build_wspd

DEFAULT_NEIGHBORHOOD = 0.25
QUAD_ORDER = 8
MAX_LEVEL = 60
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(QUAD_ORDER)


# ---------------------------------------------------------------- geometry


def box_min_distance(lo, hi, points):
    """(q, n) distances from q boxes to n points (0 inside)."""
    gap = np.maximum(lo[:, None, :] - points[None], 0.0) + np.maximum(points[None] - hi[:, None, :], 0.0)
    return np.sqrt((gap**2).sum(axis=2))


def box_max_distance(lo, hi, points):
    """(q, n) distances from n points to the farthest corner of q boxes."""
    far = np.maximum(np.abs(lo[:, None, :] - points[None]), np.abs(hi[:, None, :] - points[None]))
    return np.sqrt((far**2).sum(axis=2))


def min_separation(points):
    """Distance from each point to its nearest other point (inf for a single point)."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return np.full(len(points), np.inf)
    dist = cdist(points, points)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


# ---------------------------------------------------------------- cube family


@dataclass
class CubeFamily:
    """Interior-disjoint dyadic cubes tiling the enclosing cube H.

    Cube ``k`` sits at quadtree ``level[k]`` with integer grid ``coords[k]``
    relative to H's lower corner. ``ring``/``pair`` name the WSPD ring whose
    resolution bound determined the cube (-1 when the cube came from the
    dichotomy repair or lies beyond every ring).
    """

    points: np.ndarray
    eps: float
    root_lo: np.ndarray
    root_side: float
    t: int
    level: np.ndarray
    coords: np.ndarray
    ring: np.ndarray
    pair: np.ndarray
    separation: np.ndarray
    n_pairs: int
    repair_splits: int

    def __len__(self):
        return len(self.level)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def side(self):
        return self.root_side / np.exp2(self.level)

    @property
    def lo(self):
        return self.root_lo + self.coords * self.side[:, None]

    @property
    def hi(self):
        return self.lo + self.side[:, None]

    @property
    def centers(self):
        return self.lo + 0.5 * self.side[:, None]

    @property
    def root_hi(self):
        return self.root_lo + self.root_side

    def dichotomy(self, lo=None, hi=None):
        """Per-cube flags (all-targets equidistance within 1+eps, eps-close to some target)."""
        lo = self.lo if lo is None else lo
        hi = self.hi if hi is None else hi
        return _dichotomy_flags(lo, hi, self.points, self.separation, self.eps)


def _dichotomy_flags(lo, hi, points, separation, eps):
    near = box_min_distance(lo, hi, points)
    far = box_max_distance(lo, hi, points)
    equidistant = np.all(far <= (1.0 + eps) * near, axis=1)
    close = np.any(far <= eps * separation[None, :], axis=1)
    return equidistant, close


def ring_count(d, eps):
    """Last ring index t = 2 log2(2d / eps), rounded up."""
    return int(math.ceil(2.0 * math.log2(2.0 * d / eps)))


def _ring_tables(points, eps, t):
    """Per target point: sorted ring radii over all WSPD pairs it represents.

    Returns (pairs, tables) where tables[b] = (radii, pair ids, ring ids).
    """
    n, d = points.shape
    pairs = build_wspd(points, eps / 4.0)
    radii = [[] for _ in range(n)]
    owner = [[] for _ in range(n)]
    rings = [[] for _ in range(n)]
    steps = np.exp2(np.arange(t + 1))
    for pid, pr in enumerate(pairs):
        length = float(np.linalg.norm(points[pr.rep_first] - points[pr.rep_second]))
        delta = steps * (eps / (2.0 * math.sqrt(d))) * length
        for rep in (pr.rep_first, pr.rep_second):
            radii[rep].append(delta)
            owner[rep].append(np.full(t + 1, pid))
            rings[rep].append(np.arange(t + 1))
    tables = []
    for b in range(n):
        if radii[b]:
            r = np.concatenate(radii[b])
            o = np.concatenate(owner[b])
            g = np.concatenate(rings[b])
            order = np.lexsort((g, o, r))
            tables.append((r[order], o[order], g[order]))
        else:
            tables.append((np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)))
    return pairs, tables


def _ring_requirement(lo, hi, points, tables, eps):
    """Largest admissible side per cube from the rings it meets, with the binding ring."""
    q = lo.shape[0]
    req = np.full(q, np.inf)
    pair = np.full(q, -1, dtype=np.int64)
    ring = np.full(q, -1, dtype=np.int64)
    near = box_min_distance(lo, hi, points)
    for b, (radii, owner, rings) in enumerate(tables):
        if len(radii) == 0:
            continue
        # smallest ring radius delta_i that still reaches the cube
        idx = np.searchsorted(radii, near[:, b], side="left")
        hit = idx < len(radii)
        side = np.full(q, np.inf)
        side[hit] = eps * radii[idx[hit]]
        better = side < req
        req[better] = side[better]
        pair[better] = owner[idx[better]]
        ring[better] = rings[idx[better]]
    return req, pair, ring


def build_cubes(points, eps, extent=None):
    """Hypercube family for target points ``points`` at accuracy ``eps``.

    H has side (4/eps) * diam(B) and is centered at the target closest to the
    middle of B's bounding box. A cube is split while it is larger than
    eps * delta_i for some WSPD ring delta_i it meets, or while it fails both
    dichotomy conditions (equidistance within 1+eps for every target, or
    eps-closeness to one target). For a single target, H is centered there
    with half-side ``extent`` and gridded uniformly at eps * diam(H) / (2 sqrt d).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    if n == 0:
        raise InputError("the target set is empty")
    eps = clamp_eps(eps)
    t = ring_count(d, eps)
    separation = min_separation(points)
    if n == 1:
        half = float(extent) if extent else 1.0
        if not half > 0:
            raise InputError("extent must be positive")
        root_side = 2.0 * half
        root_lo = points[0] - half
        # cell side eps * diam(H) / (2 sqrt d) = eps * root_side / 2
        level = int(math.ceil(math.log2(2.0 / eps)))
        per_axis = 2**level
        grid = np.stack(np.meshgrid(*[np.arange(per_axis)] * d, indexing="ij"), -1).reshape(-1, d)
        m = len(grid)
        return CubeFamily(
            points, eps, root_lo, root_side, t, np.full(m, level), grid.astype(np.int64),
            np.full(m, -1), np.full(m, -1), separation, 0, 0,
        )

    diam = float(pdist(points).max())
    if diam <= 0:
        raise InputError("duplicate target points")
    mid = 0.5 * (points.min(axis=0) + points.max(axis=0))
    anchor = points[np.argmin(np.linalg.norm(points - mid, axis=1))]
    root_side = 4.0 / eps * diam
    root_lo = anchor - 0.5 * root_side
    pairs, tables = _ring_tables(points, eps, t)

    offsets = np.stack(np.meshgrid(*[np.arange(2)] * d, indexing="ij"), -1).reshape(-1, d)
    coords = np.zeros((1, d), dtype=np.int64)
    out_level, out_coords, out_ring, out_pair = [], [], [], []
    repairs = 0
    level = 0
    while len(coords):
        if level > MAX_LEVEL:
            raise InvariantViolation("cube refinement did not terminate")
        side = root_side / 2.0**level
        lo = root_lo + coords * side
        hi = lo + side
        req, pair, ring = _ring_requirement(lo, hi, points, tables, eps)
        equidistant, close = _dichotomy_flags(lo, hi, points, separation, eps)
        coarse = side > req
        bad = ~(equidistant | close)
        repairs += int(np.count_nonzero(bad & ~coarse))
        split = coarse | bad
        keep = ~split
        out_level.append(np.full(int(keep.sum()), level))
        out_coords.append(coords[keep])
        out_ring.append(np.where(np.isfinite(req[keep]), ring[keep], -1))
        out_pair.append(np.where(np.isfinite(req[keep]), pair[keep], -1))
        parents = coords[split]
        coords = (2 * parents[:, None, :] + offsets[None]).reshape(-1, d)
        level += 1
    return CubeFamily(
        points, eps, root_lo, root_side, t,
        np.concatenate(out_level), np.concatenate(out_coords),
        np.concatenate(out_ring), np.concatenate(out_pair),
        separation, len(pairs), repairs,
    )


def size_bound(n, d, eps):
    """n * eps^(-2d) * log(1/eps): the family-size scale (constant omitted)."""
    return n * eps ** (-2 * d) * math.log(1.0 / eps)


# ---------------------------------------------------------------- quadrature


@njit(cache=True)
def _gl_box(lo, hi, point, nodes, weights):
    d = lo.shape[0]
    order = nodes.shape[0]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    idx = np.zeros(d, dtype=np.int64)
    total = 0.0
    while True:
        w = 1.0
        r2 = 0.0
        for a in range(d):
            x = mid[a] + half[a] * nodes[idx[a]]
            w *= weights[idx[a]]
            r2 += (x - point[a]) ** 2
        total += w * math.sqrt(r2)
        a = 0
        while a < d:
            idx[a] += 1
            if idx[a] < order:
                break
            idx[a] = 0
            a += 1
        if a == d:
            break
    vol = 1.0
    for a in range(d):
        vol *= half[a]
    return total * vol


@njit(cache=True)
def _distance_integral(lo, hi, point, nodes, weights, max_depth):
    """Integral of |x - point| over the box, split at ``point`` then refined near it."""
    d = lo.shape[0]
    cap = 1 + (max_depth + 2) * 2**d * 4
    stack_lo = np.empty((cap, d))
    stack_hi = np.empty((cap, d))
    stack_depth = np.empty(cap, dtype=np.int64)
    top = 0
    # split at the point so the kink sits on piece corners
    n_pieces = 1
    cuts = np.zeros(d, dtype=np.bool_)
    for a in range(d):
        if lo[a] < point[a] < hi[a]:
            cuts[a] = True
            n_pieces *= 2
    for code in range(n_pieces):
        bit = 0
        for a in range(d):
            stack_lo[top, a] = lo[a]
            stack_hi[top, a] = hi[a]
            if cuts[a]:
                if (code >> bit) & 1:
                    stack_lo[top, a] = point[a]
                else:
                    stack_hi[top, a] = point[a]
                bit += 1
        stack_depth[top] = 0
        top += 1
    total = 0.0
    child_lo = np.empty(d)
    child_hi = np.empty(d)
    while top > 0:
        top -= 1
        blo = stack_lo[top].copy()
        bhi = stack_hi[top].copy()
        depth = stack_depth[top]
        gap2 = 0.0
        diam2 = 0.0
        for a in range(d):
            g = max(blo[a] - point[a], 0.0, point[a] - bhi[a])
            gap2 += g * g
            diam2 += (bhi[a] - blo[a]) ** 2
        if depth >= max_depth or gap2 >= diam2:
            total += _gl_box(blo, bhi, point, nodes, weights)
            continue
        for code in range(2**d):
            for a in range(d):
                m = 0.5 * (blo[a] + bhi[a])
                if (code >> a) & 1:
                    child_lo[a] = m
                    child_hi[a] = bhi[a]
                else:
                    child_lo[a] = blo[a]
                    child_hi[a] = m
            stack_lo[top] = child_lo
            stack_hi[top] = child_hi
            stack_depth[top] = depth + 1
            top += 1
    return total


@njit(cache=True)
def _piece_integrals(lows, highs, targets, nodes, weights, max_depth):
    out = np.empty(lows.shape[0])
    for k in range(lows.shape[0]):
        out[k] = _distance_integral(lows[k], highs[k], targets[k], nodes, weights, max_depth)
    return out


def box_distance_integrals(lows, highs, targets, max_depth=12):
    """Integral of |x - target_k| over box k for each k (Gauss-Legendre order 8)."""
    lows = np.ascontiguousarray(lows, dtype=float)
    highs = np.ascontiguousarray(highs, dtype=float)
    targets = np.ascontiguousarray(targets, dtype=float)
    if len(lows) == 0:
        return np.zeros(0)
    return _piece_integrals(lows, highs, targets, _GL_NODES, _GL_WEIGHTS, max_depth)


def _require_mixture(oracle):
    if not isinstance(oracle, UniformBoxMixture):
        raise InputError("semi-discrete cost evaluation needs a uniform box mixture oracle")


def mean_box_distances(oracle, lo, hi, targets):
    """Mean distance to targets[k] under the oracle restricted to box k.

    Returns (mean distances, restricted masses); boxes without mass get 0.
    """
    _require_mixture(oracle)
    lo = np.atleast_2d(lo)
    hi = np.atleast_2d(hi)
    q = lo.shape[0]
    integral = np.zeros(q)
    mass = np.zeros(q)
    volumes = oracle.volumes
    for k in range(len(oracle.weights)):
        plo = np.maximum(lo, oracle.lows[k])
        phi = np.minimum(hi, oracle.highs[k])
        ok = np.all(phi > plo, axis=1) & (oracle.weights[k] > 0)
        if not ok.any():
            continue
        density = oracle.weights[k] / volumes[k]
        integral[ok] += density * box_distance_integrals(plo[ok], phi[ok], targets[ok])
        mass[ok] += density * np.prod(phi[ok] - plo[ok], axis=1)
    mean = np.divide(integral, mass, out=np.zeros(q), where=mass > 0)
    return mean, mass


def outside_distance_integrals(oracle, lo, hi, targets):
    """Integral of |x - target| over the oracle mass outside the box [lo, hi], per target."""
    _require_mixture(oracle)
    targets = np.atleast_2d(targets)
    m = len(targets)
    total = np.zeros(m)
    volumes = oracle.volumes
    for k in range(len(oracle.weights)):
        if oracle.weights[k] <= 0:
            continue
        density = oracle.weights[k] / volumes[k]
        clo = np.repeat(oracle.lows[k][None], m, axis=0)
        chi = np.repeat(oracle.highs[k][None], m, axis=0)
        whole = box_distance_integrals(clo, chi, targets)
        plo = np.maximum(clo, lo)
        phi = np.minimum(chi, hi)
        inner = np.zeros(m)
        if np.all(phi > plo):
            inner = box_distance_integrals(plo, phi, targets)
        total += density * (whole - inner)
    return np.maximum(total, 0.0)


# ---------------------------------------------------------------- routing and discretization


@dataclass
class LocalRouting:
    cube_mass: np.ndarray
    residual: np.ndarray
    nu_residual: np.ndarray
    cube: np.ndarray
    target: np.ndarray
    mass: np.ndarray


def neighborhood_radius(cubes, eps, c=DEFAULT_NEIGHBORHOOD):
    return c * eps * cubes.separation


def route_local(oracle, nu, cubes, eps, c=DEFAULT_NEIGHBORHOOD, cube_mass=None):
    """Greedily send the mass of cubes near each target to that target.

    Targets are processed in ascending index order; within a neighborhood the
    cubes closest to the target go first. A partially used cube keeps its mass
    reduced by the pre-update demand of the target.
    """
    eps = clamp_eps(eps)
    if not 0 < c <= 1:
        raise InputError("neighborhood constant must lie in (0, 1]")
    lo, hi = cubes.lo, cubes.hi
    if cube_mass is None:
        cube_mass = oracle.box_mass_many(lo, hi)
    residual = cube_mass.copy()
    demand = np.asarray(nu.masses, dtype=float).copy()
    radius = neighborhood_radius(cubes, eps, c)
    centers = cubes.centers
    out_cube, out_target, out_mass = [], [], []
    for b in range(len(demand)):
        if demand[b] <= 0:
            continue
        near = box_min_distance(lo, hi, cubes.points[b : b + 1])[:, 0]
        cand = np.flatnonzero(near <= radius[b])
        if len(cand) == 0:
            continue
        far = box_max_distance(lo[cand], hi[cand], cubes.points[b : b + 1])[:, 0]
        cand = cand[(far <= radius[b]) & (residual[cand] > 0)]
        gap = np.linalg.norm(centers[cand] - cubes.points[b], axis=1)
        for q in cand[np.lexsort((cand, gap))]:
            take = min(residual[q], demand[b])
            out_cube.append(q)
            out_target.append(b)
            out_mass.append(take)
            if residual[q] <= demand[b]:
                demand[b] -= residual[q]
                residual[q] = 0.0
            else:
                residual[q] -= demand[b]
                demand[b] = 0.0
                break
            if demand[b] <= 0:
                break
    return LocalRouting(
        cube_mass, residual, demand,
        np.array(out_cube, dtype=np.int64), np.array(out_target, dtype=np.int64),
        np.array(out_mass, dtype=float),
    )


@dataclass
class Discretization:
    """Residual mass collapsed to cube centers, plus the mass outside H at ``witness``."""

    cube_ids: np.ndarray
    centers: np.ndarray
    masses: np.ndarray
    far_mass: float
    witness: np.ndarray | None

    @property
    def total(self):
        return float(self.masses.sum() + self.far_mass)

    def measure(self):
        """The discrete measure mu-hat, or None when it carries no mass."""
        pts, mass = self.centers, self.masses
        if self.witness is not None:
            pts = np.vstack([pts, self.witness[None]])
            mass = np.r_[mass, self.far_mass]
        if len(mass) == 0 or mass.sum() <= 0:
            return None
        return DiscreteMeasure(pts, mass)


def discretize(oracle, cubes, residual):
    """Collapse residual cube masses to centers; mass outside H goes to a witness point."""
    residual = np.asarray(residual, dtype=float)
    ids = np.flatnonzero(residual > 0)
    inside = oracle.box_mass(cubes.root_lo, cubes.root_hi)
    far = max(float(oracle.total - inside), 0.0)
    witness = None
    if far > 1e-15 * oracle.total:
        finder = getattr(oracle, "witness_outside", None)
        witness = finder(cubes.root_lo, cubes.root_hi) if finder else None
        if witness is None:
            raise InputError("oracle has mass outside H but gives no witness point there")
    else:
        far = 0.0
    return Discretization(ids, cubes.centers[ids], residual[ids], far, witness)


# ---------------------------------------------------------------- plan


@dataclass
class SemiPlan:
    """Semi-discrete plan in three entry classes: local, lifted and far."""

    cubes: CubeFamily
    local: tuple
    lifted: tuple
    far_witness: np.ndarray | None
    far: tuple
    cost: float = 0.0
    costs: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_targets(self):
        return len(self.cubes.points)

    def column_sums(self):
        n = self.n_targets
        # empty weights make bincount return integers, so cast each term
        parts = [(self.local[1], self.local[2]), (self.lifted[1], self.lifted[2]), self.far]
        return sum(np.bincount(idx, w, n).astype(float) for idx, w in parts)

    @property
    def total_mass(self):
        return float(self.local[2].sum() + self.lifted[2].sum() + self.far[1].sum())

    def evaluate(self, oracle):
        """Cost with each cube's mass spread as the oracle density inside the cube."""
        cubes = self.cubes
        lo, hi = cubes.lo, cubes.hi
        parts = {}
        for name, (cube, target, mass) in (("local", self.local), ("lifted", self.lifted)):
            mean, _ = mean_box_distances(oracle, lo[cube], hi[cube], cubes.points[target])
            parts[name] = float(np.dot(mass, mean))
        far_cost = 0.0
        if len(self.far[0]):
            far_total = float(self.far[1].sum())
            outside_mass = oracle.total - oracle.box_mass(cubes.root_lo, cubes.root_hi)
            integral = outside_distance_integrals(
                oracle, cubes.root_lo, cubes.root_hi, cubes.points[self.far[0]]
            )
            if outside_mass > 0 and far_total > 0:
                far_cost = float(np.dot(self.far[1], integral / outside_mass))
        parts["far"] = far_cost
        self.costs = parts
        self.cost = parts["local"] + parts["lifted"] + parts["far"]
        return self.cost

    def to_dict(self):
        cubes = self.cubes
        used = np.unique(np.r_[self.local[0], self.lifted[0]])
        lo, side = cubes.lo[used], cubes.side[used]
        return {
            "hypercube": {"lo": cubes.root_lo.tolist(), "side": float(cubes.root_side)},
            "eps": float(cubes.eps),
            "targets": cubes.points.tolist(),
            "cubes": {
                "ids": used.tolist(),
                "lo": lo.tolist(),
                "side": side.tolist(),
            },
            "local": [[int(q), int(b), float(m)] for q, b, m in zip(*self.local)],
            "lifted": [[int(q), int(b), float(m)] for q, b, m in zip(*self.lifted)],
            "far": {
                "witness": None if self.far_witness is None else self.far_witness.tolist(),
                "entries": [[int(b), float(m)] for b, m in zip(*self.far)],
            },
            "cost": float(self.cost),
            "costs": {k: float(v) for k, v in self.costs.items()},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def _audit(label, value, expected, scale):
    if abs(value - expected) > MASS_RTOL * max(scale, 1e-300):
        raise InvariantViolation(f"mass audit failed at {label}: {value!r} vs {expected!r}")


def _discrete_phase(points, masses, nu_points, demand, eps, seed, solver):
    """Plan (source ids, target ids, masses) between collapsed cubes and targets."""
    if solver == "exact":
        cost = cdist(points, nu_points)
        plan, _, _ = pd_ot(cost, masses, demand)
        return plan.src, plan.dst, plan.mass
    if solver == "spanner":
        from .mwu import solve_discrete

        keep = demand > 0
        mu_hat = DiscreteMeasure(points, masses)
        nu_hat = DiscreteMeasure(nu_points[keep], demand[keep])
        result = solve_discrete(mu_hat, nu_hat, eps=eps, seed=seed)
        plan = result.plan
        return plan.src, np.flatnonzero(keep)[plan.dst], plan.mass
    raise InputError(f"unknown discrete solver {solver!r}")


def solve_semidiscrete(oracle, nu, eps=0.25, seed=0, c=DEFAULT_NEIGHBORHOOD, discrete="exact"):
    """(1+eps)-approximate plan from the oracle density to the discrete measure ``nu``.

    ``discrete`` picks the solver for the collapsed instance: ``"exact"`` (the
    primal-dual min-cost flow) or ``"spanner"`` (the approximate discrete solver).
    Mass outside H is routed proportionally to the residual demand.
    """
    eps = clamp_eps(eps)
    if oracle.dim != nu.dim:
        raise InputError("oracle and target dimensions differ")
    total = float(oracle.total)
    gap = abs(total - nu.total) / max(total, nu.total)
    if gap > MASS_RTOL:
        raise InfeasibleError(f"unbalanced totals {total!r} vs {nu.total!r}")
    nu_masses = np.asarray(nu.masses, dtype=float) * (total / nu.total)
    points = np.asarray(nu.points, dtype=float)
    extent = None
    if len(points) == 1:
        blo, bhi = oracle.bbox
        extent = float(np.max(np.maximum(np.abs(blo - points[0]), np.abs(bhi - points[0])))) * (1 + 1e-9)
        extent = max(extent, 1e-12)
    cubes = build_cubes(points, eps, extent=extent)
    routing = route_local(oracle, DiscreteMeasure(points, nu_masses), cubes, eps, c)
    disc = discretize(oracle, cubes, routing.residual)
    _audit("local routing", routing.mass.sum() + routing.residual.sum() + disc.far_mass, total, total)
    _audit("residual balance", disc.total, routing.nu_residual.sum(), total)

    demand = routing.nu_residual.copy()
    far_b = np.zeros(0, np.int64)
    far_m = np.zeros(0)
    if disc.far_mass > 0:
        share = demand / demand.sum()
        far_alloc = disc.far_mass * share
        far_b = np.flatnonzero(far_alloc > 0)
        far_m = far_alloc[far_b]
        demand = np.maximum(demand - far_alloc, 0.0)
    lifted = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    # rounding crumbs below the audit tolerance have no demand left to meet
    if disc.masses.sum() > MASS_RTOL * total and demand.sum() > 0:
        src, dst, mass = _discrete_phase(disc.centers, disc.masses, points, demand, eps, seed, discrete)
        lifted = (disc.cube_ids[src], dst, mass)
    plan = SemiPlan(
        cubes,
        (routing.cube, routing.target, routing.mass),
        lifted,
        disc.witness,
        (far_b, far_m),
    )
    _audit("plan total", plan.total_mass, total, total)
    cols = plan.column_sums()
    worst = float(np.abs(cols - nu_masses).max())
    if worst > MASS_RTOL * total:
        raise InvariantViolation(f"plan column sums off by {worst:.3e}")
    plan.evaluate(oracle)
    plan.diagnostics = {
        "n_cubes": len(cubes),
        "n_wspd_pairs": cubes.n_pairs,
        "ring_count": cubes.t + 1,
        "repair_splits": cubes.repair_splits,
        "local_mass": float(routing.mass.sum()),
        "lifted_mass": float(lifted[2].sum()),
        "far_mass": float(disc.far_mass),
        "discrete_size": int(len(disc.masses)),
        "discrete_solver": discrete,
        "seed": int(seed),
    }
    return plan, plan.cost


def grid_reference(oracle, nu, step, return_duals=False):
    """Exact cost after collapsing the oracle onto a grid of the given step.

    Returns (cost, allowance): moving every grid cell's mass to its center
    changes the optimal cost by at most allowance = step * sqrt(d) / 2 * total.
    With ``return_duals`` the target-side duals of the grid solve come third.
    """
    blo, bhi = oracle.bbox
    d = oracle.dim
    counts = np.maximum(np.ceil((bhi - blo) / step).astype(int), 1)
    axes = [blo[a] + step * np.arange(counts[a]) for a in range(d)]
    lo = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    hi = lo + step
    mass = oracle.box_mass_many(lo, hi)
    keep = mass > 0
    centers = 0.5 * (lo[keep] + hi[keep])
    cost = cdist(centers, nu.points)
    demand = np.asarray(nu.masses, dtype=float) * (oracle.total / nu.total)
    plan, _, duals = pd_ot(cost, mass[keep], demand)
    value = float(np.dot(plan.mass, cost[plan.src, plan.dst]))
    allowance = step * math.sqrt(d) / 2.0 * float(oracle.total)
    if return_duals:
        return value, allowance, duals
    return value, allowance
