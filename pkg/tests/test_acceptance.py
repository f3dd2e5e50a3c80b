"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (also repeated in
the pytest terminal summary) before asserting.
"""

import functools
import math
import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist, pdist

import oracles
from ot_approx.exact import dual_certificate, exact_ot_euclidean, pd_ot
from ot_approx.greedy import GreedyOracle, check_c1_c2, rho_bound
from ot_approx.hiergraph import build_graph, build_tree, stretch_stats
from ot_approx.measures import (
    MASS_RTOL,
    DiscreteMeasure,
    PiecewiseUniform1D,
    gen_box_mixture,
    gen_piecewise_1d,
    gen_random,
    gen_targets,
)
from ot_approx.mwu import solve_discrete
from ot_approx.scaling1d import (
    ScalingState1D,
    diameter_1d,
    run_scaling,
    scale_count,
    scale_step,
    slack_units,
    w1_closed_form,
)
from ot_approx.semidiscrete import (
    build_cubes,
    discretize,
    grid_reference,
    min_separation,
    route_local,
    solve_semidiscrete,
)
from ot_approx.wspd import build_wspd

pytestmark = pytest.mark.acceptance


# ---------------------------------------------------------------- 1


def test_criterion_1_exact_oracle(record_criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst_rel, worst_cert, enumerated = 0.0, 0.0, 0
    for trial in range(200):
        if trial % 4 == 0:
            m = int(rng.integers(1, 5))
            k = int(rng.integers(1, 9 - m))
        else:
            m, k = (int(v) for v in rng.integers(1, 13, size=2))
        cost = cdist(rng.random((m, 2)), rng.random((k, 2)))
        supplies = rng.dirichlet(np.ones(m))
        demands = rng.dirichlet(np.ones(k))
        plan, y_left, y_right = pd_ot(cost, supplies, demands)
        value = float(np.dot(plan.mass, cost[plan.src, plan.dst]))
        references = [oracles.lp_transport(cost, supplies, demands)]
        if m + k <= 8:
            references.append(oracles.enumerate_transport(cost, supplies, demands))
            enumerated += 1
        for ref in references:
            worst_rel = max(worst_rel, abs(value - ref) / max(ref, 1e-300))
        viol, gap = dual_certificate(cost, plan, y_left, y_right)
        worst_cert = max(worst_cert, max(viol, gap) / cost.max())
        assert not plan.marginal_violations(supplies, demands)
    elapsed = time.perf_counter() - start
    ok = worst_rel <= 1e-7 and worst_cert <= 1e-7 and elapsed < 30
    record_criterion(1, ok, f"200 instances ({enumerated} also by basis enumeration), "
                     f"max rel gap {worst_rel:.1e}, max certificate slack {worst_cert:.1e}, "
                     f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_spanner_bounds(record_criterion):
    start = time.perf_counter()
    worst_mean, lower_violations, details = 0.0, 0, []
    ok = True
    for n in (50, 200, 500):
        for d in (1, 2):
            for eps in (0.1, 0.25):
                mu, _ = gen_random(n, d, seed=n + d)
                pts = mu.points
                rng = np.random.default_rng(n * 10 + d)
                pairs = rng.integers(0, n, size=(400, 2))
                pairs = pairs[pairs[:, 0] != pairs[:, 1]][:200]
                assert len(pairs) == 200
                stats = stretch_stats(pts, eps, range(50), pairs)
                bound = (1 + 3 * eps) * 1.25
                lower_violations += stats["lower_violations"]
                ratio = stats["max_pair_mean"] / bound
                worst_mean = max(worst_mean, ratio)
                ok &= stats["lower_violations"] == 0 and stats["max_pair_mean"] <= bound
                details.append(f"{n}/{d}/{eps}:{stats['max_pair_mean']:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    record_criterion(2, ok, f"lower-bound violations {lower_violations}, worst per-pair mean "
                     f"stretch / bound {worst_mean:.3f}, {elapsed:.1f}s")
    assert ok, details


# ---------------------------------------------------------------- 3


def test_criterion_3_greedy_certificates(record_criterion):
    start = time.perf_counter()
    sizes = (16, 32, 64, 128, 256)
    worst_c2, worst_greedy, worst_shortcut_frac, ok = 0.0, 0.0, 0.0, True
    for trial in range(100):
        n = sizes[trial % len(sizes)]
        mu, nu = gen_random(n, 2, seed=1000 + trial)
        pts = np.unique(np.vstack([mu.points, nu.points]), axis=0)
        tree = build_tree(pts, 0.25, seed=trial)
        graph = build_graph(tree)
        index = {tuple(p): i for i, p in enumerate(graph.coords[: graph.n_input])}
        eta = np.zeros(graph.n_vertices)
        for p, m in zip(mu.points, mu.masses):
            eta[index[tuple(p)]] += m
        for p, m in zip(nu.points, nu.masses):
            eta[index[tuple(p)]] -= m
        state = GreedyOracle(graph, tree).flow(eta)
        rho = rho_bound(2, tree.height, tree.eps)
        report = check_c1_c2(graph, state, eta, rho)
        worst_c2 = max(worst_c2, report["c2_rel_gap"])
        worst_greedy = max(worst_greedy, report["greedy_max_ratio"])
        worst_shortcut_frac = max(worst_shortcut_frac, report["shortcut_max_ratio"] / rho)
        ok &= report["c1_pass"] and report["c2_rel_gap"] <= 1e-7
        ok &= report["conservation"] <= 1e-9 * mu.total
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    record_criterion(3, ok, f"100 instances, max C2 rel gap {worst_c2:.1e}, greedy-edge ratio "
                     f"{worst_greedy:.6f}, shortcut ratio / rho {worst_shortcut_frac:.3f}, "
                     f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4, 5, 6

DISCRETE_EPS = 0.25


@functools.lru_cache(maxsize=None)
def discrete_runs():
    start = time.perf_counter()
    runs = []
    for n in (64, 128, 256):
        for seed in range(20):
            mu, nu = gen_random(n, 2, seed=seed)
            result = solve_discrete(mu, nu, eps=DISCRETE_EPS, seed=seed)
            _, exact = exact_ot_euclidean(mu, nu)
            runs.append({
                "n": n,
                "seed": seed,
                "ratio": result.cost / exact,
                "exact": exact,
                "violations": result.plan.marginal_violations(mu.masses, nu.masses, rtol=1e-9),
                "diag": result.diagnostics,
            })
    return runs, time.perf_counter() - start


def test_criterion_4_discrete_end_to_end(record_criterion):
    runs, elapsed = discrete_runs()
    ok, parts = True, []
    for n in (64, 128, 256):
        ratios = np.array([r["ratio"] for r in runs if r["n"] == n])
        median, p90 = float(np.median(ratios)), float(np.percentile(ratios, 90))
        ok &= median <= 1.25 and p90 <= 1.40
        parts.append(f"n={n} median {median:.4f} p90 {p90:.4f}")
    marginals_ok = all(not r["violations"] for r in runs)
    ok &= marginals_ok and elapsed < 300
    record_criterion(4, ok, f"{'; '.join(parts)}; marginals exact: {marginals_ok}; {elapsed:.1f}s")
    assert ok


def test_criterion_5_mwu_ladder(record_criterion):
    runs, _ = discrete_runs()
    eps_part = DISCRETE_EPS / 3
    ok, worst_final, worst_guess, worst_rounds = True, 0.0, 0.0, 0.0
    for r in runs:
        boost = r["diag"]["runs"][0]["boost"]
        g = boost["accepted_guess"]
        final_over = boost["final_cost"] / ((1 + eps_part) * g)
        guess_over = g / ((1 + eps_part) * r["exact"] * boost["rho"])
        rounds_over = max(e["rounds"] for e in boost["guesses"]) / boost["round_limit"]
        worst_final = max(worst_final, final_over)
        worst_guess = max(worst_guess, guess_over)
        worst_rounds = max(worst_rounds, rounds_over)
        ok &= final_over <= 1 + 1e-9 and guess_over <= 1 and rounds_over <= 1
    record_criterion(5, ok, f"{len(runs)} runs; max final/((1+e)g) {worst_final:.4f}, "
                     f"max g/((1+e) exact rho) {worst_guess:.2e}, max rounds/T {worst_rounds:.2e}")
    assert ok


def test_criterion_6_recovery(record_criterion):
    runs, _ = discrete_runs()
    ok, worst_cost, worst_steps = True, 0.0, 0.0
    for r in runs:
        rec = r["diag"]["runs"][0]
        cost_over = rec["plan_cost"] / rec["flow_cost"]
        steps_frac = rec["recovery_steps"] / rec["recovery_step_bound"]
        worst_cost = max(worst_cost, cost_over)
        worst_steps = max(worst_steps, steps_frac)
        ok &= cost_over <= 1 + 1e-12 and steps_frac <= 1 and not r["violations"]
    record_criterion(6, ok, f"{len(runs)} runs; max plan/flow cost {worst_cost:.4f}, "
                     f"max steps / (|E| deg_max) {worst_steps:.2e}, marginals at 1e-9 ok")
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_semidiscrete(record_criterion):
    start = time.perf_counter()
    ok, worst, count = True, 0.0, 0
    for n_targets in (4, 16):
        for eps in (0.25, 0.1):
            for seed in range(10):
                oracle = gen_box_mixture(3, 2, seed=seed)
                nu = gen_targets(n_targets, 2, seed=seed)
                _, cost = solve_semidiscrete(oracle, nu, eps=eps, seed=seed)
                step = eps / 8 * float(min_separation(nu.points).min())
                reference, allowance = grid_reference(oracle, nu, step)
                limit = (1 + eps) * reference + allowance
                worst = max(worst, cost / limit)
                ok &= cost <= limit
                count += 1
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    record_criterion(7, ok, f"{count} runs; max cost / ((1+eps) grid + allowance) {worst:.4f}, "
                     f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 8, 9


def test_criterion_8_scaling_additive(record_criterion):
    start = time.perf_counter()
    ok, worst_grid, worst_closed = True, 0.0, 0.0
    for n in (4, 8, 16):
        for eps in (1e-2, 1e-3):
            for seed in range(20):
                oracle = gen_piecewise_1d(5, seed=seed)
                nu = gen_targets(n, 1, seed=seed)
                cost = run_scaling(oracle, nu, eps).cost
                reference, allowance = grid_reference(oracle, nu, eps / 16)
                closed = w1_closed_form(oracle, nu)
                worst_grid = max(worst_grid, abs(cost - reference) / (eps + allowance))
                worst_closed = max(worst_closed, abs(cost - closed) / eps)
                ok &= abs(cost - reference) <= eps + allowance and abs(cost - closed) <= eps
    uniform = PiecewiseUniform1D.from_intervals([[0.0, 1.0]], [1.0])
    halves = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    analytic = []
    for eps in (1e-2, 1e-3):
        value = run_scaling(uniform, halves, eps).cost
        analytic.append(value)
        ok &= abs(value - 0.25) <= eps
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    record_criterion(8, ok, f"120 runs; max |gap| / (eps + allowance) vs grid {worst_grid:.3f}, "
                     f"max |gap| / eps vs closed form {worst_closed:.3f}; analytic case "
                     f"{analytic[0]:.6f}, {analytic[1]:.7f}; {elapsed:.1f}s")
    assert ok


def test_criterion_9_scaling_duals(record_criterion):
    ok, worst, scale_mismatch = True, 0.0, 0
    for n in (4, 8, 16):
        for eps in (1e-2, 1e-3):
            for seed in range(20):
                oracle = gen_piecewise_1d(5, seed=seed)
                nu = gen_targets(n, 1, seed=seed)
                result = run_scaling(oracle, nu, eps, duals_mode=True)
                _, _, grid_duals = grid_reference(oracle, nu, eps / 16, return_duals=True)
                diff = result.duals - grid_duals
                shift = 0.5 * (diff.max() + diff.min())
                err = float(np.abs(diff - shift).max())
                worst = max(worst, err / eps)
                diameter = diameter_1d(oracle, nu.points[:, 0])
                expected = math.ceil(math.log2(5 * n * diameter / eps))
                scale_mismatch += result.scales != expected
                ok &= err <= eps and result.scales == expected
    record_criterion(9, ok, f"120 runs; max aligned dual error / eps {worst:.3f}; "
                     f"scale-count mismatches {scale_mismatch}")
    assert ok


# ---------------------------------------------------------------- 10


def _fuzz_scaling(rng, seed):
    """Run scales by hand and audit every structural invariant; returns violation count."""
    n = int(rng.integers(1, 9))
    oracle = gen_piecewise_1d(int(rng.integers(1, 6)), seed=seed)
    nu = gen_targets(n, 1, seed=seed)
    eps = float(10 ** rng.uniform(-3, -1))
    targets = nu.points[:, 0]
    diameter = diameter_1d(oracle, targets)
    state = ScalingState1D(targets, nu.masses.copy(), np.zeros(n), diameter)
    violations = 0
    levels = 4 * n + 1
    for index in range(scale_count(n, diameter, eps)):
        y_start, delta = state.y.copy(), state.delta
        if index:
            ratio = y_start / (2 * delta)
            violations += int(np.abs(ratio - np.round(ratio)).max() > 1e-9)
        scale_step(state, oracle)
        exp, arr, costs = state.expansions, state.arrangement, state.costs
        # nesting, checked directly on the interval endpoints
        ok = exp.lo <= exp.hi
        inner, outer = slice(None, -1), slice(1, None)
        both = ok[:, inner] & ok[:, outer]
        violations += int(np.any(ok[:, inner] & ~ok[:, outer]))
        violations += int(np.any(both & ((exp.lo[:, outer] > exp.lo[:, inner])
                                         | (exp.hi[:, outer] < exp.hi[:, inner]))))
        # arrangement partitions the support and carries all the mass
        s_lo, s_hi = oracle.support
        violations += int(arr.edges[0] != s_lo or arr.edges[-1] != s_hi)
        violations += int(abs(arr.masses.sum() - oracle.total) > MASS_RTOL)
        # slack identity on sampled points of every cell
        width = arr.right - arr.left
        cells = np.flatnonzero(width > 1e-9 * diameter)
        cell = rng.choice(cells, size=200)
        x = arr.left[cell] + rng.uniform(0.05, 0.95, size=200) * width[cell]
        units = slack_units(targets, y_start, delta, x)
        expected = costs[cell]
        capped = expected == levels
        violations += int(np.any(units[~capped] != expected[~capped]))
        violations += int(np.any(units[capped] < levels))
        record = state.history[-1]
        violations += int(record.max_support_cost > 4 * n)
        violations += int(record.carried_max_cost is not None and record.carried_max_cost > 4)
    return violations


def _fuzz_wspd(rng):
    n = int(rng.integers(2, 41))
    d = int(rng.integers(1, 4))
    pts = np.unique(rng.random((n, d)), axis=0)
    s = float(rng.uniform(0.1, 1.0))
    pairs = build_wspd(pts, s)
    coverage = oracles.wspd_coverage(pairs, len(pts))
    upper = np.triu(np.ones_like(coverage, dtype=bool), 1)
    violations = int(np.any(coverage[upper] != 1)) + int(np.any(coverage[~upper] != 0))
    for pair in pairs:
        a, b = pts[pair.first.indices], pts[pair.second.indices]
        diam = max(pdist(a).max(initial=0.0), pdist(b).max(initial=0.0))
        violations += int(diam > s * cdist(a, b).min() * (1 + 1e-12))
    return violations


def _fuzz_cubes(rng, seed, samples=10_000):
    d = int(rng.integers(1, 3))
    n_targets = int(rng.integers(2, 5))
    eps = float(rng.choice([0.25, 0.3, 0.4]))
    nu = gen_targets(n_targets, d, seed=seed)
    cubes = build_cubes(nu.points, eps)
    violations = 0
    # the family tiles H
    volume = float(np.sum(cubes.side ** d))
    violations += int(abs(volume - cubes.root_side ** d) > 1e-9 * cubes.root_side ** d)
    pick = rng.integers(0, len(cubes), size=samples)
    lo, side = cubes.lo[pick], cubes.side[pick][:, None]
    p = lo + rng.random((samples, d)) * side
    q = lo + rng.random((samples, d)) * side
    dp, dq = cdist(p, nu.points), cdist(q, nu.points)
    equidistant = np.all(dp <= (1 + eps) * dq + 1e-12, axis=1)
    separation = min_separation(nu.points)
    close = np.any((dp <= eps * separation + 1e-12) & (dq <= eps * separation + 1e-12), axis=1)
    violations += int(np.sum(~(equidistant | close)))
    return violations


def _fuzz_mass_audit(rng, seed):
    n_targets = int(rng.integers(1, 5))
    oracle = gen_box_mixture(int(rng.integers(1, 4)), 2, seed=seed)
    nu = gen_targets(n_targets, 2, seed=seed)
    eps = 0.3
    total = oracle.total
    tol = 1e-9 * total
    extent = None
    if n_targets == 1:
        blo, bhi = oracle.bbox
        extent = float(np.max(np.maximum(np.abs(blo - nu.points[0]), np.abs(bhi - nu.points[0])))) * 1.01
    cubes = build_cubes(nu.points, eps, extent=extent)
    routing = route_local(oracle, nu, cubes, eps)
    disc = discretize(oracle, cubes, routing.residual)
    violations = 0
    violations += int(abs(routing.cube_mass.sum() + disc.far_mass - total) > tol)
    violations += int(abs(routing.mass.sum() + routing.residual.sum() - routing.cube_mass.sum()) > tol)
    violations += int(abs(routing.mass.sum() + routing.nu_residual.sum() - nu.total) > tol)
    violations += int(abs(disc.total - routing.nu_residual.sum()) > tol)
    plan, _ = solve_semidiscrete(oracle, nu, eps=eps, seed=seed)
    violations += int(abs(plan.total_mass - total) > tol)
    violations += int(np.abs(plan.column_sums() - nu.masses).max() > tol)
    return violations


def test_criterion_10_structural_fuzz(record_criterion):
    start = time.perf_counter()
    counts = {"scaling": 0, "wspd": 0, "cubes": 0, "mass": 0}
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        counts["scaling"] += _fuzz_scaling(rng, seed)
        counts["wspd"] += _fuzz_wspd(rng)
        counts["cubes"] += _fuzz_cubes(rng, seed)
        counts["mass"] += _fuzz_mass_audit(rng, seed)
    elapsed = time.perf_counter() - start
    ok = not any(counts.values())
    summary = ", ".join(f"{k} {v}" for k, v in counts.items())
    record_criterion(10, ok, f"100 fuzz seeds; violations: {summary}; {elapsed:.1f}s")
    assert ok
