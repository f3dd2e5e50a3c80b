"""Multiplicative-weights boosting of the greedy oracle and the discrete solver.

A guess g of the min-cost-flow value is tested by maintaining a pre-flow of
cost at most g on both orientations of every spanner edge. Each round routes
the residual demand greedily; when the greedy cost of the residual is at most
eps * g the pre-flow plus the greedy residual flow is returned, otherwise every
arc is scaled by exp(beta * slack) and the pre-flow is rescaled to budget g.
Guesses climb geometrically until one terminates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import InvariantViolation
from .greedy import C_RHO, GreedyOracle, check_c1_c2, rho_bound
from .hiergraph import build_graph, build_tree
from .measures import balance, clamp_eps
from .plan import TransportPlan
from .recover import recover_plan

STEP_NORMALIZED = "normalized"
STEP_LITERAL = "literal"
DEFAULT_KAPPA = 0.5
DEFAULT_ROUND_CAP = 30


def round_limit(rho, eps, n_arcs):
    """Round budget per guess from the multiplicative-weights analysis."""
    return int(math.ceil(4.0 * rho**2 / eps**2 * math.log(max(n_arcs, 2))))


@dataclass
class FlowProblem:
    """Spanner graph, its greedy oracle and a vertex demand (positive = supply)."""

    graph: object
    tree: object
    eta: np.ndarray
    oracle: GreedyOracle = None

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if self.oracle is None:
            self.oracle = GreedyOracle(self.graph, self.tree)
        self.tails = np.r_[self.graph.eu, self.graph.ev]
        self.heads = np.r_[self.graph.ev, self.graph.eu]
        self.lengths = np.r_[self.graph.length, self.graph.length]

    @property
    def n_arcs(self):
        return len(self.lengths)

    def divergence(self, flow):
        n = self.graph.n_vertices
        return np.bincount(self.tails, flow, n) - np.bincount(self.heads, flow, n)

    def cost(self, flow):
        return float(np.dot(flow, self.lengths))

    def slack(self, y):
        return (y[self.tails] - y[self.heads]) / self.lengths


@dataclass
class MwuState:
    guess: float
    iteration: int
    preflow: np.ndarray
    cap: int
    beta: float
    rho: float


@dataclass
class RoundResult:
    terminated: bool
    gap: float
    composite: np.ndarray
    composite_cost: float
    max_ratio: float


def estimate_cost(problem, rho=None):
    """Bracket (g_lo, g_hi) from one greedy call: g_hi is the greedy cost, g_lo = g_hi / rho."""
    if not np.any(problem.eta):
        return 0.0, 0.0
    rho = rho_bound(problem.tree.dim, problem.tree.height, problem.tree.eps) if rho is None else rho
    g_hi = problem.cost(problem.oracle.flow(problem.eta).flow)
    return g_hi / rho, g_hi


def lipschitz_envelope(graph, y):
    """Largest function below y that is 1-Lipschitz for the graph metric."""
    n = graph.n_vertices
    base = float(y.min())
    rows = np.r_[graph.eu, graph.ev, np.full(n, n)]
    cols = np.r_[graph.ev, graph.eu, np.arange(n)]
    # a tiny positive weight keeps zero offsets as explicit edges
    weights = np.r_[graph.length, graph.length, y - base + 1e-300]
    matrix = csr_matrix((weights, (rows, cols)), shape=(n + 1, n + 1))
    return base + dijkstra(matrix, indices=n)[:n]


def dual_lower_bound(problem, y):
    """Certified lower bound on the min-cost flow value from any dual vector."""
    return float(np.dot(problem.eta, lipschitz_envelope(problem.graph, y)))


def initial_state(problem, guess, rho, eps, step=STEP_NORMALIZED, kappa=DEFAULT_KAPPA):
    preflow = guess / (problem.lengths * problem.n_arcs)
    beta = eps / (2 * rho**2) if step == STEP_LITERAL else kappa
    return MwuState(guess, 0, preflow, round_limit(rho, eps, problem.n_arcs), beta, rho)


def mwu_round(state, problem, eps, step=STEP_NORMALIZED):
    """One boosting round; updates ``state`` in place unless it terminates."""
    residual = problem.eta - problem.divergence(state.preflow)
    greedy = problem.oracle.flow(residual)
    gap = float(np.dot(residual, greedy.y))
    report = check_c1_c2(problem.graph, greedy, residual, state.rho)
    if not report["c2_pass"]:
        raise InvariantViolation(f"greedy strong duality failed: {report['c2_rel_gap']:.3e}")
    state.iteration += 1
    composite = state.preflow + greedy.flow
    result = RoundResult(
        gap <= eps * state.guess, gap, composite, problem.cost(composite), report["max_ratio"]
    )
    if result.terminated or report["max_ratio"] > state.rho:
        return result
    slack = problem.slack(greedy.y)
    if step == STEP_LITERAL:
        beta = state.beta
    else:
        peak = np.abs(slack).max()
        beta = state.beta / peak if peak > 0 else 0.0
    state.preflow = state.preflow * np.exp(beta * slack)
    cost = problem.cost(state.preflow)
    if cost > state.guess:
        state.preflow *= state.guess / cost
    return result


@dataclass
class BoostReport:
    g_lo: float
    g_hi: float
    lower_bound: float
    rho: float
    round_limit: int
    round_cap: int
    accepted_guess: float = 0.0
    terminated: bool = False
    fallback: bool = False
    final_cost: float = 0.0
    guesses: list = field(default_factory=list)
    rho_doublings: int = 0

    @property
    def total_rounds(self):
        return sum(g["rounds"] for g in self.guesses)

    def to_dict(self):
        return {
            "g_lo": self.g_lo,
            "g_hi": self.g_hi,
            "lower_bound": self.lower_bound,
            "rho": self.rho,
            "round_limit": self.round_limit,
            "round_cap": self.round_cap,
            "accepted_guess": self.accepted_guess,
            "terminated": self.terminated,
            "fallback": self.fallback,
            "final_cost": self.final_cost,
            "total_rounds": self.total_rounds,
            "rho_doublings": self.rho_doublings,
            "guesses": self.guesses,
        }


def boost(problem, eps_mwu, eps_ladder, kappa=DEFAULT_KAPPA, round_cap=DEFAULT_ROUND_CAP,
          step=STEP_NORMALIZED, warm_start=True, c_rho=C_RHO):
    """(1+eps)-boosted flow on the spanner graph and a run report.

    Guesses follow g_lo * (1 + eps_ladder)^k. Guesses with (1 + eps_mwu) g below
    a certified dual lower bound cannot terminate and are skipped. The flow
    returned is the cheapest demand-routing composite seen, which never costs
    more than the one certified at the accepted guess.
    """
    rho = rho_bound(problem.tree.dim, problem.tree.height, problem.tree.eps, c_rho)
    greedy = problem.oracle.flow(problem.eta)
    g_hi = problem.cost(greedy.flow)
    g_lo = g_hi / rho
    lower = dual_lower_bound(problem, greedy.y)
    cap_t = round_limit(rho, eps_mwu, problem.n_arcs)
    report = BoostReport(g_lo, g_hi, lower, rho, cap_t, round_cap)
    best_flow, best_cost = greedy.flow, g_hi
    if g_hi == 0:
        report.terminated = True
        return best_flow, report
    guess = g_lo
    while (1 + eps_mwu) * guess < lower and guess * (1 + eps_ladder) <= g_hi:
        report.guesses.append({"guess": guess, "rounds": 0, "terminated": False, "skipped": True})
        guess *= 1 + eps_ladder
    state = None
    while guess <= g_hi:
        if state is None or not warm_start:
            state = initial_state(problem, guess, rho, eps_mwu, step, kappa)
        start = state.preflow.copy()
        entry = {"guess": guess, "rounds": 0, "terminated": False, "skipped": False}
        limit = min(round_cap, state.cap) if round_cap else state.cap
        while entry["rounds"] < limit:
            result = mwu_round(state, problem, eps_mwu, step)
            entry["rounds"] += 1
            if result.composite_cost < best_cost:
                best_flow, best_cost = result.composite, result.composite_cost
            if result.max_ratio > state.rho:
                # the oracle broke the assumed distortion: double rho and restart this guess
                rho *= 2
                report.rho_doublings += 1
                state = initial_state(problem, guess, rho, eps_mwu, step, kappa)
                if warm_start:
                    state.preflow = start
                entry["rounds"] = 0
                continue
            if result.terminated:
                entry["terminated"] = True
                break
        entry["last_gap"] = float(result.gap)
        report.guesses.append(entry)
        if entry["terminated"]:
            report.accepted_guess = guess
            report.terminated = True
            break
        guess *= 1 + eps_ladder
        state.guess = guess
        state.preflow = state.preflow * (1 + eps_ladder)
    if not report.terminated:
        # the greedy flow itself certifies the guess g_hi
        report.accepted_guess = g_hi
        report.fallback = True
    report.rho = rho
    report.final_cost = best_cost
    return best_flow, report


# ---------------------------------------------------------------- end to end


@dataclass
class DiscreteResult:
    plan: TransportPlan
    cost: float
    diagnostics: dict


def _vertex_maps(mu, nu):
    pts = np.vstack([mu.points, nu.points])
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return uniq, inverse[: len(mu)], inverse[len(mu):]


def _diagonal_plan(mu, nu, vertex_of_a, vertex_of_b):
    b_at = {int(v): j for j, v in enumerate(vertex_of_b)}
    src, dst, mass = [], [], []
    for i, v in enumerate(vertex_of_a):
        j = b_at[int(v)]
        src.append(i)
        dst.append(j)
        mass.append(mu.masses[i])
    plan = TransportPlan(src, dst, mass)
    plan.evaluate(mu.points, nu.points)
    return plan


def measured_stretch(graph, n_pairs=64, seed=0):
    """Mean and max ratio of graph distance to Euclidean distance over sampled input pairs."""
    n = graph.n_input
    if n < 2:
        return {"mean": 1.0, "max": 1.0}
    rng = np.random.default_rng(seed)
    sources = np.unique(rng.integers(0, n, size=min(8, n)))
    dist = graph.distances_from(sources)
    ratios = []
    for row, s in enumerate(sources):
        targets = rng.integers(0, n, size=max(n_pairs // len(sources), 1))
        targets = targets[targets != s]
        euclid = np.linalg.norm(graph.coords[targets] - graph.coords[s], axis=1)
        ratios.append(dist[row, targets] / euclid)
    ratios = np.concatenate(ratios) if ratios else np.ones(1)
    return {"mean": float(ratios.mean()), "max": float(ratios.max())}


def solve_discrete(mu, nu, eps=0.25, seed=0, repeats=1, kappa=DEFAULT_KAPPA,
                   round_cap=DEFAULT_ROUND_CAP, step=STEP_NORMALIZED, normalize=False,
                   c_rho=C_RHO):
    """Approximate Euclidean OT plan through the spanner, boosting and recovery.

    The user eps is split evenly between the spanner, the boosting accuracy and
    the guess ladder. With ``repeats > 1`` independent shifts are tried and the
    cheapest plan is kept.
    """
    mu, nu = balance(mu, nu, normalize)
    eps = clamp_eps(eps)
    part = eps / 3
    uniq, vertex_of_a, vertex_of_b = _vertex_maps(mu, nu)
    eta_in = np.zeros(len(uniq))
    np.add.at(eta_in, vertex_of_a, mu.masses)
    np.add.at(eta_in, vertex_of_b, -nu.masses)
    eta_in[np.abs(eta_in) <= 1e-15 * mu.total] = 0.0
    if not np.any(eta_in):
        plan = _diagonal_plan(mu, nu, vertex_of_a, vertex_of_b)
        diag = {"eps": eps, "seed": seed, "runs": [], "trivial": True, "cost": plan.cost}
        return DiscreteResult(plan, plan.cost, diag)
    runs = []
    best = None
    for rep in range(max(int(repeats), 1)):
        tree = build_tree(uniq, part, seed=seed + rep)
        graph = build_graph(tree)
        eta = np.zeros(graph.n_vertices)
        eta[: len(uniq)] = eta_in
        problem = FlowProblem(graph, tree, eta)
        flow, report = boost(problem, part, part, kappa, round_cap, step, c_rho=c_rho)
        conservation = np.abs(problem.divergence(flow) - eta).max()
        if conservation > 1e-9 * mu.total:
            raise InvariantViolation(f"boosted flow misses the demand by {conservation:.3e}")
        plan, rec = recover_plan(graph, mu, nu, vertex_of_a, vertex_of_b, flow, return_report=True)
        run = {
            "seed": seed + rep,
            "height": tree.height,
            "n_vertices": graph.n_vertices,
            "n_edges": graph.n_edges,
            "boost": report.to_dict(),
            "flow_cost": rec.flow_cost,
            "plan_cost": rec.plan_cost,
            "recovery_steps": rec.steps,
            "recovery_step_bound": rec.step_bound,
            "stretch": measured_stretch(graph, seed=seed + rep),
        }
        runs.append(run)
        if best is None or plan.cost < best.cost:
            best = plan
    diag = {"eps": eps, "seed": seed, "repeats": len(runs), "c_rho": c_rho, "runs": runs,
            "trivial": False, "cost": best.cost}
    return DiscreteResult(best, best.cost, diag)
