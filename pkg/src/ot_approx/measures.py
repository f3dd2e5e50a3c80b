"""Discrete measures, box-mass density oracles, random generators and file I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InfeasibleError, InputError

MASS_RTOL = 1e-9
GEOM_ATOL = 1e-12
EPS_MAX = float(np.nextafter(0.5, 0.0))


def _readonly(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point set. Build with :meth:`from_arrays` to merge duplicates."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        m = np.asarray(self.masses, dtype=float)
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise InputError(f"points must be a (k, d) array, got shape {pts.shape}")
        if m.shape != (pts.shape[0],):
            raise InputError("masses must have one entry per point")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(m))):
            raise InputError("non-finite coordinate or mass")
        if np.any(m < 0):
            raise InputError("negative mass")
        if m.sum() <= 0:
            raise InputError("total mass must be positive")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise InputError("duplicate points; use DiscreteMeasure.from_arrays")
        object.__setattr__(self, "points", _readonly(pts.copy()))
        object.__setattr__(self, "masses", _readonly(m.copy()))

    @classmethod
    def from_arrays(cls, points, masses):
        """Merge identical points (summing their mass) and validate."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = np.asarray(masses, dtype=float).reshape(-1)
        if pts.shape[0] != m.shape[0]:
            raise InputError("points and masses differ in length")
        if pts.shape[0] == 0:
            raise InputError("empty measure")
        uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
        merged = np.zeros(len(uniq))
        np.add.at(merged, inverse.reshape(-1), m)
        # keep first-appearance order so ids stay close to the input order
        first = np.full(len(uniq), len(pts))
        np.minimum.at(first, inverse.reshape(-1), np.arange(len(pts)))
        order = np.argsort(first, kind="stable")
        return cls(uniq[order], merged[order])

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def total(self):
        return float(self.masses.sum())

    def __len__(self):
        return self.points.shape[0]

    def scaled(self, factor):
        return DiscreteMeasure(self.points, self.masses * factor)

    def to_dict(self):
        return {"points": self.points.tolist(), "masses": self.masses.tolist()}


# ---------------------------------------------------------------- oracles


class DensityOracle:
    """Continuous distribution answering axis-aligned box mass queries."""

    dim: int

    @property
    def total(self):
        raise NotImplementedError

    @property
    def bbox(self):
        raise NotImplementedError

    def box_mass_many(self, lo, hi):
        raise NotImplementedError

    def box_mass(self, lo, hi):
        lo = np.asarray(lo, dtype=float).reshape(1, -1)
        hi = np.asarray(hi, dtype=float).reshape(1, -1)
        return float(self.box_mass_many(lo, hi)[0])


@dataclass(frozen=True)
class UniformBoxMixture(DensityOracle):
    """Mixture of uniform densities on boxes; component ``k`` carries ``weights[k]``."""

    lows: np.ndarray
    highs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lows, dtype=float))
        hi = np.atleast_2d(np.asarray(self.highs, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if lo.shape != hi.shape or lo.shape[0] != w.shape[0] or lo.shape[0] == 0:
            raise InputError("mixture needs matching box corners and weights")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(np.isfinite(w))):
            raise InputError("non-finite mixture component")
        if np.any(hi - lo <= 0):
            raise InputError("every mixture box needs positive extent on all axes")
        if np.any(w < 0) or w.sum() <= 0:
            raise InputError("mixture weights must be non-negative with positive total")
        object.__setattr__(self, "lows", _readonly(lo.copy()))
        object.__setattr__(self, "highs", _readonly(hi.copy()))
        object.__setattr__(self, "weights", _readonly(w.copy()))

    @property
    def dim(self):
        return self.lows.shape[1]

    @property
    def total(self):
        return float(self.weights.sum())

    @property
    def bbox(self):
        return self.lows.min(axis=0), self.highs.max(axis=0)

    @property
    def volumes(self):
        return np.prod(self.highs - self.lows, axis=1)

    def box_mass_many(self, lo, hi):
        """Masses of ``q`` boxes given as (q, d) corner arrays."""
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        out = np.zeros(lo.shape[0])
        ext = self.highs - self.lows
        for k in range(len(self.weights)):
            overlap = np.minimum(hi, self.highs[k]) - np.maximum(lo, self.lows[k])
            frac = np.prod(np.clip(overlap, 0.0, None) / ext[k], axis=1)
            out += self.weights[k] * frac
        return out

    def clip_components(self, lo, hi):
        """Intersections of one query box with every component.

        Returns (lows, highs, masses) for components with positive overlap.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        clo = np.maximum(self.lows, lo)
        chi = np.minimum(self.highs, hi)
        ext = np.clip(chi - clo, 0.0, None)
        frac = np.prod(ext / (self.highs - self.lows), axis=1)
        mass = self.weights * frac
        keep = mass > 0
        return clo[keep], chi[keep], mass[keep]

    def witness_outside(self, lo, hi):
        """A support point outside the box [lo, hi], or None if the support is inside."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        for k in np.flatnonzero(self.weights > 0):
            clo, chi = self.lows[k], self.highs[k]
            for axis in range(self.dim):
                point = 0.5 * (clo + chi)
                if clo[axis] < lo[axis]:
                    point[axis] = 0.5 * (clo[axis] + min(lo[axis], chi[axis]))
                    return point
                if chi[axis] > hi[axis]:
                    point[axis] = 0.5 * (chi[axis] + max(hi[axis], clo[axis]))
                    return point
        return None

    def sample(self, count, rng):
        comp = rng.choice(len(self.weights), size=count, p=self.weights / self.total)
        u = rng.random((count, self.dim))
        return self.lows[comp] + u * (self.highs[comp] - self.lows[comp])

    def scaled(self, factor):
        return type(self)(self.lows, self.highs, self.weights * factor)

    def to_dict(self):
        return {
            "kind": "uniform_box_mixture",
            "components": [
                {"box": [lo.tolist(), hi.tolist()], "weight": float(w)}
                for lo, hi, w in zip(self.lows, self.highs, self.weights)
            ],
        }


class PiecewiseUniform1D(UniformBoxMixture):
    """One-dimensional mixture of uniform intervals with closed-form integrals."""

    def __post_init__(self):
        super().__post_init__()
        if self.dim != 1:
            raise InputError("PiecewiseUniform1D is one-dimensional")

    @classmethod
    def from_intervals(cls, intervals, weights):
        iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
        return cls(iv[:, :1], iv[:, 1:], weights)

    @property
    def support(self):
        lo, hi = self.bbox
        return float(lo[0]), float(hi[0])

    def interval_mass(self, left, right):
        """Mass of [left, right] for arrays of endpoints."""
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        lo, hi = self.lows[:, 0], self.highs[:, 0]
        overlap = np.minimum(right[..., None], hi) - np.maximum(left[..., None], lo)
        return (np.clip(overlap, 0.0, None) / (hi - lo) * self.weights).sum(axis=-1)

    def cdf(self, x):
        return self.interval_mass(np.full_like(np.asarray(x, dtype=float), -np.inf), x)

    def abs_moment(self, left, right, p):
        """Integral of |x - p| d mu(x) over [left, right], elementwise over arrays."""
        left, right, p = np.broadcast_arrays(
            np.asarray(left, dtype=float), np.asarray(right, dtype=float), np.asarray(p, dtype=float)
        )
        lo, hi = self.lows[:, 0], self.highs[:, 0]
        a = np.maximum(left[..., None], lo)
        b = np.minimum(right[..., None], hi)
        b = np.maximum(a, b)
        dens = self.weights / (hi - lo)
        pp = p[..., None]

        def prim(x):
            return 0.5 * (x - pp) * np.abs(x - pp)

        return ((prim(b) - prim(a)) * dens).sum(axis=-1)

    def to_dict(self):
        return {
            "kind": "piecewise_uniform_1d",
            "pieces": [
                {"interval": [float(lo[0]), float(hi[0])], "weight": float(w)}
                for lo, hi, w in zip(self.lows, self.highs, self.weights)
            ],
        }


def oracle_from_dict(spec):
    try:
        kind = spec["kind"]
        if kind == "uniform_box_mixture":
            comps = spec["components"]
            lows = [c["box"][0] for c in comps]
            highs = [c["box"][1] for c in comps]
            weights = [c["weight"] for c in comps]
            return UniformBoxMixture(lows, highs, weights)
        if kind == "piecewise_uniform_1d":
            pieces = spec["pieces"]
            return PiecewiseUniform1D.from_intervals(
                [p["interval"] for p in pieces], [p["weight"] for p in pieces]
            )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise InputError(f"malformed oracle spec: {exc}") from exc
    raise InputError(f"unknown oracle kind {spec.get('kind')!r}")


def load_oracle(path):
    return oracle_from_dict(_read_json(path))


# ---------------------------------------------------------------- balance


def balance(mu, nu, normalize=False):
    """Return measures with identical totals.

    Totals within ``MASS_RTOL`` are reconciled by rescaling ``nu``; larger gaps
    are rejected unless ``normalize`` asks for both sides to be scaled to 1.
    """
    if mu.dim != nu.dim:
        raise InputError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if normalize:
        return mu.scaled(1.0 / mu.total), nu.scaled(1.0 / nu.total)
    gap = abs(mu.total - nu.total) / max(mu.total, nu.total)
    if gap > MASS_RTOL:
        raise InfeasibleError(f"unbalanced totals {float(mu.total)!r} vs {float(nu.total)!r}")
    return mu, nu.scaled(mu.total / nu.total)


# ---------------------------------------------------------------- file I/O


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _measure_from_dict(block, dim):
    try:
        pts = np.asarray(block["points"], dtype=float)
        masses = np.asarray(block["masses"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed measure block: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise InputError(f"points must be {dim}-dimensional")
    return DiscreteMeasure.from_arrays(pts, masses)


def instance_from_dict(data, normalize=False):
    if not isinstance(data, dict):
        raise InputError("instance must be a JSON object")
    try:
        dim = int(data["dim"])
        mu_block, nu_block = data["mu"], data["nu"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed instance: {exc}") from exc
    if dim < 1:
        raise InputError("dim must be positive")
    mu = _measure_from_dict(mu_block, dim)
    nu = _measure_from_dict(nu_block, dim)
    return balance(mu, nu, normalize)


def instance_to_dict(mu, nu):
    return {"dim": mu.dim, "mu": mu.to_dict(), "nu": nu.to_dict()}


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("json", "csv"):
            raise InputError(f"unknown format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    return "csv" if suffix == ".csv" else "json"


def load_instance(path, fmt=None, normalize=False):
    """Read a (mu, nu) pair from JSON or CSV."""
    fmt = _infer_format(path, fmt)
    if fmt == "json":
        return instance_from_dict(_read_json(path), normalize)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError("empty CSV")
    header = [h.strip() for h in rows[0]]
    dim = len(header) - 2
    if dim < 1 or header != [f"x{i + 1}" for i in range(dim)] + ["mass", "side"]:
        raise InputError("CSV header must be x1..xd,mass,side")
    sides = {"mu": ([], []), "nu": ([], [])}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2 or row[-1].strip() not in sides:
            raise InputError(f"bad CSV row {lineno}")
        try:
            vals = [float(v) for v in row[:-1]]
        except ValueError as exc:
            raise InputError(f"bad number on CSV row {lineno}") from exc
        pts, ms = sides[row[-1].strip()]
        pts.append(vals[:dim])
        ms.append(vals[dim])
    measures = []
    for name in ("mu", "nu"):
        pts, ms = sides[name]
        if not pts:
            raise InputError(f"no {name} rows")
        measures.append(DiscreteMeasure.from_arrays(np.array(pts), np.array(ms)))
    return balance(measures[0], measures[1], normalize)


def save_instance(path, mu, nu, fmt=None):
    fmt = _infer_format(path, fmt)
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(instance_to_dict(mu, nu), fh)
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(mu.dim)] + ["mass", "side"])
        for name, meas in (("mu", mu), ("nu", nu)):
            for p, m in zip(meas.points, meas.masses):
                writer.writerow([repr(float(v)) for v in p] + [repr(float(m)), name])


def load_semidiscrete(path):
    """Read {"oracle": {...}, "nu": {"points", "masses"}} and balance nu to the oracle."""
    data = _read_json(path)
    if not isinstance(data, dict) or "oracle" not in data or "nu" not in data:
        raise InputError("semi-discrete instance needs 'oracle' and 'nu'")
    oracle = oracle_from_dict(data["oracle"])
    nu = _measure_from_dict(data["nu"], oracle.dim)
    gap = abs(oracle.total - nu.total) / max(oracle.total, nu.total)
    if gap > MASS_RTOL:
        raise InfeasibleError(f"unbalanced totals {float(oracle.total)!r} vs {float(nu.total)!r}")
    return oracle, nu.scaled(oracle.total / nu.total)


def save_semidiscrete(path, oracle, nu):
    with open(path, "w") as fh:
        json.dump({"oracle": oracle.to_dict(), "nu": nu.to_dict()}, fh)


# ---------------------------------------------------------------- generators


def _masses(rng, k, uniform):
    if uniform:
        return np.full(k, 1.0 / k)
    m = rng.dirichlet(np.ones(k))
    return m / m.sum()


def gen_random(n, d, spread_cap=1e6, seed=0, uniform=False):
    """Random balanced instance with ``n`` points per side on a snapped grid.

    Coordinates are integers divided by the grid size, so the minimum distance
    between distinct points is one grid step and the spread stays below
    ``spread_cap``.
    """
    if n < 2 or d < 1:
        raise InputError("need n >= 2 and d >= 1")
    if spread_cap < 2:
        raise InputError("spread_cap must be at least 2")
    rng = np.random.default_rng(seed)
    side = int(math.floor(spread_cap / math.sqrt(d))) + 1
    if side < 2 or side**d < n:
        raise InputError(f"spread_cap {spread_cap} too small for {n} distinct points in {d}-d")
    side = min(side, 2**40)

    def draw():
        chosen = {}
        while len(chosen) < n:
            for row in map(tuple, rng.integers(0, side, size=(n, d))):
                if len(chosen) == n:
                    break
                chosen.setdefault(row, None)
        return np.array(list(chosen), dtype=float) / (side - 1)

    a_pts = draw()
    b_pts = draw()
    mu = DiscreteMeasure.from_arrays(a_pts, _masses(rng, n, uniform))
    nu = DiscreteMeasure.from_arrays(b_pts, _masses(rng, n, uniform))
    return balance(mu, nu)


def gen_box_mixture(components, d, seed=0, lo=0.0, hi=1.0, min_side=0.1):
    """Random mixture of ``components`` boxes inside [lo, hi]^d with unit total."""
    rng = np.random.default_rng(seed)
    sides = rng.uniform(min_side, hi - lo, size=(components, d))
    lows = lo + rng.random((components, d)) * (hi - lo - sides)
    weights = rng.dirichlet(np.ones(components))
    return UniformBoxMixture(lows, lows + sides, weights / weights.sum())


def gen_targets(n, d, seed=0, lo=0.0, hi=1.0, min_separation=None, uniform=False):
    """``n`` random target points in [lo, hi]^d, pairwise at least ``min_separation`` apart.

    The default separation floor is (hi - lo) / (4 n^(1/d)), loose enough for
    rejection sampling to succeed quickly.
    """
    if n < 1 or d < 1:
        raise InputError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    if min_separation is None:
        min_separation = (hi - lo) / (4.0 * n ** (1.0 / d))
    points = []
    for _ in range(1000 * n):
        cand = lo + (hi - lo) * rng.random(d)
        if all(np.linalg.norm(cand - p) >= min_separation for p in points):
            points.append(cand)
            if len(points) == n:
                return DiscreteMeasure(np.array(points), _masses(rng, n, uniform))
    raise InputError("could not place targets at the requested separation")


def gen_piecewise_1d(pieces, seed=0, lo=0.0, hi=1.0):
    """Random piecewise-uniform density with contiguous pieces covering [lo, hi]."""
    rng = np.random.default_rng(seed)
    cuts = np.sort(rng.uniform(lo, hi, size=pieces - 1))
    edges = np.concatenate([[lo], cuts, [hi]])
    weights = rng.dirichlet(np.ones(pieces))
    return PiecewiseUniform1D.from_intervals(np.c_[edges[:-1], edges[1:]], weights / weights.sum())


# ---------------------------------------------------------------- metadata


def clamp_eps(eps):
    eps = float(eps)
    if not eps > 0 or not math.isfinite(eps):
        raise InputError(f"eps must be a positive number, got {eps}")
    return min(eps, EPS_MAX)


def spread(points):
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 2:
        return 1.0
    dist = pdist(pts)
    return float(dist.max() / dist.min())


@dataclass(frozen=True)
class InstanceMeta:
    diameter: float
    spread: float
    seed: int
    eps: float
    extra: dict = field(default_factory=dict)


def instance_meta(mu, nu, eps, seed=0):
    pts = np.vstack([mu.points, nu.points])
    uniq = np.unique(pts, axis=0)
    diam = float(pdist(uniq).max()) if len(uniq) > 1 else 0.0
    return InstanceMeta(
        diameter=diam, spread=spread(uniq), seed=int(seed) & (2**64 - 1), eps=clamp_eps(eps)
    )
