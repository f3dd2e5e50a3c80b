"""Sparse transport plans and the marginal repair pass."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .measures import MASS_RTOL


@dataclass
class TransportPlan:
    """Entries (src[k], dst[k], mass[k]) coupling source ids to target ids."""

    src: np.ndarray
    dst: np.ndarray
    mass: np.ndarray
    cost: float | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        self.mass = np.asarray(self.mass, dtype=float).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.mass)):
            raise InputError("plan columns differ in length")

    def __len__(self):
        return len(self.mass)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    @classmethod
    def from_dense(cls, matrix, tol=0.0):
        rows, cols = np.nonzero(np.asarray(matrix) > tol)
        return cls(rows, cols, np.asarray(matrix)[rows, cols])

    def to_dense(self, n_src, n_dst):
        out = np.zeros((n_src, n_dst))
        np.add.at(out, (self.src, self.dst), self.mass)
        return out

    def evaluate(self, src_points, dst_points):
        """Euclidean cost; also cached on the plan."""
        if len(self) == 0:
            self.cost = 0.0
            return 0.0
        diff = np.asarray(src_points)[self.src] - np.asarray(dst_points)[self.dst]
        self.cost = float(np.dot(self.mass, np.linalg.norm(diff, axis=1)))
        return self.cost

    def marginals(self, n_src, n_dst):
        rows = np.bincount(self.src, weights=self.mass, minlength=n_src)
        cols = np.bincount(self.dst, weights=self.mass, minlength=n_dst)
        return rows, cols

    def marginal_violations(self, mu_masses, nu_masses, rtol=MASS_RTOL):
        """List of (side, id, expected, found) where a marginal is off by more than rtol*total."""
        mu_masses = np.asarray(mu_masses, dtype=float)
        nu_masses = np.asarray(nu_masses, dtype=float)
        if len(self) and (self.src.max() >= len(mu_masses) or self.dst.max() >= len(nu_masses)):
            return [("plan", -1, 0.0, 0.0)]
        if np.any(self.mass < 0):
            return [("plan", int(np.argmin(self.mass)), 0.0, float(self.mass.min()))]
        rows, cols = self.marginals(len(mu_masses), len(nu_masses))
        tol = rtol * max(mu_masses.sum(), nu_masses.sum())
        out = []
        for side, got, want in (("mu", rows, mu_masses), ("nu", cols, nu_masses)):
            for idx in np.flatnonzero(np.abs(got - want) > tol):
                out.append((side, int(idx), float(want[idx]), float(got[idx])))
        return out

    def to_dict(self):
        return {
            "cost": self.cost,
            "entries": [
                [int(s), int(t), float(m)] for s, t, m in zip(self.src, self.dst, self.mass)
            ],
        }

    def save(self, path):
        if str(path).lower().endswith(".csv"):
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["src", "dst", "mass"])
                for s, t, m in zip(self.src, self.dst, self.mass):
                    writer.writerow([int(s), int(t), repr(float(m))])
        else:
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        try:
            if str(path).lower().endswith(".csv"):
                with open(path, newline="") as fh:
                    rows = list(csv.DictReader(fh))
                entries = [(int(r["src"]), int(r["dst"]), float(r["mass"])) for r in rows]
                cost = None
            else:
                with open(path) as fh:
                    data = json.load(fh)
                entries = [(int(s), int(t), float(m)) for s, t, m in data["entries"]]
                cost = data.get("cost")
        except (OSError, KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read plan {path}: {exc}") from exc
        if not entries:
            return cls.empty()
        src, dst, mass = zip(*entries)
        return cls(np.array(src), np.array(dst), np.array(mass), cost)


def coalesce(src, dst, mass):
    """Sum duplicate (src, dst) entries."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    mass = np.asarray(mass, dtype=float)
    if len(src) == 0:
        return TransportPlan.empty()
    key = src * (dst.max() + 1) + dst
    uniq, inv = np.unique(key, return_inverse=True)
    total = np.bincount(inv, weights=mass)
    first = np.zeros(len(uniq), dtype=np.int64)
    first[inv[::-1]] = np.arange(len(src))[::-1]
    return TransportPlan(src[first], dst[first], total)


def repair_marginals(plan, mu_masses, nu_masses, drop_rtol=1e-15):
    """Restore exact marginals after floating-point drift.

    Entries below ``drop_rtol * total`` are dropped, rows and columns that
    overshoot are scaled down, and the leftover supply is matched to the leftover
    demand with a north-west corner sweep that fills the largest remainders first.
    """
    mu_masses = np.asarray(mu_masses, dtype=float)
    nu_masses = np.asarray(nu_masses, dtype=float)
    total = mu_masses.sum()
    keep = plan.mass > drop_rtol * total
    src, dst, mass = plan.src[keep], plan.dst[keep], plan.mass[keep].copy()
    rows = np.bincount(src, weights=mass, minlength=len(mu_masses))
    over = rows > mu_masses
    if over.any():
        scale = np.ones(len(mu_masses))
        scale[over] = mu_masses[over] / rows[over]
        mass *= scale[src]
    cols = np.bincount(dst, weights=mass, minlength=len(nu_masses))
    over = cols > nu_masses
    if over.any():
        scale = np.ones(len(nu_masses))
        scale[over] = nu_masses[over] / cols[over]
        mass *= scale[dst]
    rows = np.bincount(src, weights=mass, minlength=len(mu_masses))
    cols = np.bincount(dst, weights=mass, minlength=len(nu_masses))
    supply = np.clip(mu_masses - rows, 0.0, None)
    demand = np.clip(nu_masses - cols, 0.0, None)
    extra_src, extra_dst, extra_mass = [], [], []
    s_order = [int(i) for i in np.argsort(-supply, kind="stable") if supply[i] > 0]
    d_order = [int(j) for j in np.argsort(-demand, kind="stable") if demand[j] > 0]
    si = di = 0
    while si < len(s_order) and di < len(d_order):
        i, j = s_order[si], d_order[di]
        amount = min(supply[i], demand[j])
        extra_src.append(i)
        extra_dst.append(j)
        extra_mass.append(amount)
        supply[i] -= amount
        demand[j] -= amount
        if supply[i] <= 0:
            si += 1
        if demand[j] <= 0:
            di += 1
    merged = coalesce(
        np.concatenate([src, extra_src]).astype(np.int64),
        np.concatenate([dst, extra_dst]).astype(np.int64),
        np.concatenate([mass, extra_mass]),
    )
    return merged
