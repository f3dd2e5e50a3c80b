"""Batch command-line front end: ``ot-approx <command>``.

Every solve writes a plan file and a JSON run report. Reports are written with
sorted keys and keep wall-clock measurements under a single ``timing`` key, so
two runs with the same configuration and seed differ only there.

Exit codes: 0 ok, 2 input error, 3 infeasible or unbalanced input (including a
plan that fails the marginal check), 4 internal invariant violation.
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
import secrets
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata

import click
import numpy as np

from .errors import InfeasibleError, InputError, InvariantViolation, OTError
from .exact import exact_ot_euclidean
from .greedy import C_RHO, GreedyOracle, check_c1_c2, rho_bound
from .hiergraph import build_graph, build_tree
from .measures import (
    MASS_RTOL,
    PiecewiseUniform1D,
    gen_box_mixture,
    gen_piecewise_1d,
    gen_random,
    gen_targets,
    load_instance,
    load_semidiscrete,
    save_instance,
    save_semidiscrete,
)
from .mwu import solve_discrete
from .plan import TransportPlan
from .scaling1d import Arrangement, check_delta_optimal, run_scaling
from .semidiscrete import DEFAULT_NEIGHBORHOOD, solve_semidiscrete

SEED_ENV = "OT_APPROX_SEED"
SEED_MAX = 2**64 - 1


@dataclass
class RunConfig:
    command: str
    inputs: list
    eps: float
    seed: int
    seed_source: str
    options: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        ctx = click.get_current_context(silent=True)
        if ctx is not None and ctx.find_root().obj:
            self.threads = ctx.find_root().obj["threads"]


def resolve_seed(cli_seed):
    """Seed precedence: OT_APPROX_SEED, then --seed, then a fresh random value."""
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            value = int(env.strip(), 0)
        except ValueError as exc:
            raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
        source = "env"
    elif cli_seed is not None:
        value, source = cli_seed, "option"
    else:
        value, source = secrets.randbits(32), "random"
    if not 0 <= value <= SEED_MAX:
        raise InputError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value, source


def check_eps(eps, upper=0.5):
    if not (eps > 0 and math.isfinite(eps)):
        raise InputError(f"eps must be a positive number, got {eps}")
    if upper is not None and eps >= upper:
        raise InputError(f"eps must lie in (0, {upper}), got {eps}")
    return eps


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    return value


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_report(path, config, result, timing):
    report = {
        "version": _version(),
        "config": asdict(config),
        "result": result,
        "timing": timing,
    }
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"
    if path is None or path == "-":
        click.echo(text, nl=False)
    else:
        with open(path, "w") as fh:
            fh.write(text)
    return report


def _fail(exc):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(payload), err=True)
    sys.exit(getattr(exc, "exit_code", 1))


class OTGroup(click.Group):
    """Maps library errors to exit codes with a JSON error line on stderr."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except OTError as exc:
            _fail(exc)


def _set_threads(threads):
    if threads < 1:
        raise click.BadParameter("must be at least 1", param_hint="--threads")
    if threads > 1:
        # starting numba's pool is skipped in the default single-thread case
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


@click.group(cls=OTGroup)
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker threads for the compiled kernels.")
@click.pass_context
def main(ctx, threads):
    """Approximate optimal transport solvers."""
    _set_threads(threads)
    ctx.obj = {"threads": threads}


def _seed_option(func):
    return click.option("--seed", type=int, default=None,
                        help=f"Random seed ({SEED_ENV} takes precedence).")(func)


# ---------------------------------------------------------------- gen


@main.command()
@click.option("--kind", type=click.Choice(["discrete", "semidiscrete", "scaling1d"]),
              default="discrete", show_default=True)
@click.option("-n", "--n", "n", type=int, default=64, show_default=True,
              help="Points per side (discrete) or number of targets.")
@click.option("-d", "--dim", type=int, default=2, show_default=True)
@click.option("--spread-cap", type=float, default=1e6, show_default=True)
@click.option("--components", type=int, default=3, show_default=True,
              help="Boxes (semidiscrete) or pieces (scaling1d) of the density.")
@click.option("--uniform", is_flag=True, help="Uniform instead of Dirichlet masses.")
@_seed_option
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True,
              help="Output file; .csv selects CSV for discrete instances.")
@click.pass_context
def gen(ctx, kind, n, dim, spread_cap, components, uniform, seed, out):
    """Generate a random instance file."""
    seed, source = resolve_seed(seed)
    if kind == "discrete":
        mu, nu = gen_random(n, dim, spread_cap, seed=seed, uniform=uniform)
        save_instance(out, mu, nu)
    elif kind == "semidiscrete":
        oracle = gen_box_mixture(components, dim, seed=seed)
        nu = gen_targets(n, dim, seed=seed + 1, uniform=uniform)
        save_semidiscrete(out, oracle, nu)
    else:
        oracle = gen_piecewise_1d(components, seed=seed)
        nu = gen_targets(n, 1, seed=seed + 1, uniform=uniform)
        save_semidiscrete(out, oracle, nu)
    click.echo(json.dumps({"kind": kind, "seed": seed, "seed_source": source, "out": out}))


# ---------------------------------------------------------------- solvers


@main.command("solve-discrete")
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", type=float, default=0.25, show_default=True)
@_seed_option
@click.option("--c-rho", type=float, default=C_RHO, show_default=True,
              help="Constant in the greedy distortion bound.")
@click.option("--repeats", type=int, default=1, show_default=True,
              help="Independent random shifts; the cheapest plan is kept.")
@click.option("--normalize", is_flag=True, help="Scale both sides to unit mass.")
@click.option("--plan-out", type=click.Path(dir_okay=False), default=None,
              help="Plan file (.csv or .json).")
@click.option("--report-out", type=click.Path(dir_okay=False), default=None,
              help="Run report (JSON); stdout when omitted.")
def solve_discrete_cmd(instance, eps, seed, c_rho, repeats, normalize, plan_out, report_out):
    """Approximate Euclidean OT between two discrete measures."""
    check_eps(eps)
    if repeats < 1:
        raise InputError("repeats must be at least 1")
    seed, source = resolve_seed(seed)
    config = RunConfig("solve-discrete", [instance], eps, seed, source,
                       {"c_rho": c_rho, "repeats": repeats, "normalize": normalize},
                       {"plan": plan_out, "report": report_out})
    mu, nu = load_instance(instance, normalize=normalize)
    start = time.perf_counter()
    result = solve_discrete(mu, nu, eps=eps, seed=seed, repeats=repeats, c_rho=c_rho)
    elapsed = time.perf_counter() - start
    violations = result.plan.marginal_violations(mu.masses, nu.masses)
    if violations:
        raise InvariantViolation(f"solver returned a plan with marginal violations: {violations[:3]}")
    if plan_out:
        result.plan.save(plan_out)
    write_report(report_out, config,
                 {"cost": result.cost, "plan_entries": len(result.plan),
                  "diagnostics": result.diagnostics},
                 {"solve_seconds": elapsed})


@main.command("solve-semidiscrete")
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", type=float, default=0.25, show_default=True)
@_seed_option
@click.option("--neighborhood", "c", type=float, default=DEFAULT_NEIGHBORHOOD, show_default=True,
              help="Neighborhood constant c for the local routing.")
@click.option("--discrete", type=click.Choice(["exact", "spanner"]), default="exact",
              show_default=True, help="Solver for the collapsed instance.")
@click.option("--plan-out", type=click.Path(dir_okay=False), default=None)
@click.option("--report-out", type=click.Path(dir_okay=False), default=None)
def solve_semidiscrete_cmd(instance, eps, seed, c, discrete, plan_out, report_out):
    """Approximate OT from a box-mixture density to a discrete measure."""
    check_eps(eps)
    if not 0 < c <= 1:
        raise InputError("neighborhood constant must lie in (0, 1]")
    seed, source = resolve_seed(seed)
    config = RunConfig("solve-semidiscrete", [instance], eps, seed, source,
                       {"neighborhood": c, "discrete": discrete},
                       {"plan": plan_out, "report": report_out})
    oracle, nu = load_semidiscrete(instance)
    start = time.perf_counter()
    plan, cost = solve_semidiscrete(oracle, nu, eps=eps, seed=seed, c=c, discrete=discrete)
    elapsed = time.perf_counter() - start
    if plan_out:
        plan.save(plan_out)
    write_report(report_out, config,
                 {"cost": cost, "costs": plan.costs, "diagnostics": plan.diagnostics},
                 {"solve_seconds": elapsed})


@main.command("solve-scaling1d")
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--eps", type=float, default=1e-2, show_default=True,
              help="Additive accuracy (distance units).")
@click.option("--duals-mode", is_flag=True, help="Run the extra scales for accurate duals.")
@click.option("--plan-out", type=click.Path(dir_okay=False), default=None)
@click.option("--duals-out", type=click.Path(dir_okay=False), default=None,
              help="Duals as JSON {target id: weight}.")
@click.option("--report-out", type=click.Path(dir_okay=False), default=None)
def solve_scaling1d_cmd(instance, eps, duals_mode, plan_out, duals_out, report_out):
    """Additive-eps 1-D plan from a piecewise-uniform density by cost scaling."""
    check_eps(eps, upper=None)
    config = RunConfig("solve-scaling1d", [instance], eps, 0, "unused",
                       {"duals_mode": duals_mode},
                       {"plan": plan_out, "duals": duals_out, "report": report_out})
    oracle, nu = load_semidiscrete(instance)
    start = time.perf_counter()
    result = run_scaling(oracle, nu, eps, duals_mode=duals_mode)
    elapsed = time.perf_counter() - start
    if plan_out:
        result.save(plan_out)
    if duals_out:
        result.save_duals(duals_out)
    summary = result.to_dict()
    summary.pop("plan")
    write_report(report_out, config, summary, {"solve_seconds": elapsed})


# ---------------------------------------------------------------- validate


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _instance_kind(path):
    if str(path).lower().endswith(".csv"):
        return "discrete"
    data = _read_json(path)
    if isinstance(data, dict) and "oracle" in data:
        return "scaling1d" if data["oracle"].get("kind") == "piecewise_uniform_1d" else "semidiscrete"
    return "discrete"


def _violation_lines(violations):
    lines = []
    for side, idx, want, got in violations:
        if side == "plan":
            lines.append(f"malformed plan entry {idx} (mass {got!r})")
        else:
            lines.append(f"marginal violation at {side} vertex {idx}: expected {float(want)!r}, found {float(got)!r}")
    return lines


def _column_violations(cols, demand, total, side="nu"):
    tol = MASS_RTOL * total
    return [(side, int(j), float(demand[j]), float(cols[j]))
            for j in np.flatnonzero(np.abs(cols - demand) > tol)]


def validate_discrete(instance, plan_path, against_exact, eps, seed, c_rho):
    mu, nu = load_instance(instance)
    checks, result = {}, {"kind": "discrete"}
    if plan_path is None:
        solved = solve_discrete(mu, nu, eps=eps, seed=seed, c_rho=c_rho)
        plan = solved.plan
        diag = solved.diagnostics
        if not diag.get("trivial"):
            run = diag["runs"][0]
            boost_report = run["boost"]
            eps_part = eps / 3
            checks["recovery_cost"] = run["plan_cost"] <= run["flow_cost"] * (1 + 1e-9) + 1e-12
            checks["recovery_steps"] = run["recovery_steps"] <= run["recovery_step_bound"]
            checks["mwu_final_vs_guess"] = (
                boost_report["final_cost"] <= (1 + eps_part) * boost_report["accepted_guess"] * (1 + 1e-9)
            )
            checks["mwu_round_limit"] = all(
                g["rounds"] <= boost_report["round_limit"] for g in boost_report["guesses"]
            )
            tree = build_tree(np.unique(np.vstack([mu.points, nu.points]), axis=0), eps_part, seed=seed)
            graph = build_graph(tree)
            eta = _vertex_demand(mu, nu, graph)
            greedy = GreedyOracle(graph, tree).flow(eta)
            cert = check_c1_c2(graph, greedy, eta, rho_bound(tree.dim, tree.height, tree.eps, c_rho))
            checks["greedy_c1"] = bool(cert["c1_pass"])
            checks["greedy_c2"] = bool(cert["c2_pass"])
            result["greedy"] = cert
        result["solver_cost"] = solved.cost
    else:
        plan = TransportPlan.load(plan_path)
    violations = plan.marginal_violations(mu.masses, nu.masses)
    checks["marginals"] = not violations
    cost = plan.evaluate(mu.points, nu.points) if not violations else None
    result["cost"] = cost
    result["violations"] = _violation_lines(violations)
    if against_exact and not violations:
        _, exact = exact_ot_euclidean(mu, nu)
        ratio = cost / exact if exact > 0 else (1.0 if cost <= 1e-12 else math.inf)
        result.update({"exact_cost": exact, "ratio": ratio, "ratio_within_1_plus_eps": ratio <= 1 + eps})
    return checks, result


def _vertex_demand(mu, nu, graph):
    uniq = graph.coords[: graph.n_input]
    index = {tuple(p): i for i, p in enumerate(uniq)}
    eta = np.zeros(graph.n_vertices)
    for pts, masses, sign in ((mu.points, mu.masses, 1.0), (nu.points, nu.masses, -1.0)):
        for p, m in zip(pts, masses):
            eta[index[tuple(p)]] += sign * m
    return eta


def validate_semidiscrete(instance, plan_path):
    oracle, nu = load_semidiscrete(instance)
    data = _read_json(plan_path)
    try:
        n = len(nu.masses)
        cols = np.zeros(n)
        for _, b, m in data["local"] + data["lifted"]:
            cols[b] += m
        for b, m in data["far"]["entries"]:
            cols[b] += m
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise InputError(f"malformed semi-discrete plan: {exc}") from exc
    total = float(oracle.total)
    violations = _column_violations(cols, nu.masses, total)
    checks = {
        "marginals": not violations,
        "total_mass": abs(cols.sum() - total) <= MASS_RTOL * total,
    }
    return checks, {"kind": "semidiscrete", "cost": data.get("cost"),
                    "violations": _violation_lines(violations)}


def validate_scaling1d(instance, plan_path, samples, seed):
    oracle, nu = load_semidiscrete(instance)
    if not isinstance(oracle, PiecewiseUniform1D):
        raise InputError("scaling plans need a piecewise_uniform_1d oracle")
    data = _read_json(plan_path)
    try:
        entries = np.asarray(data["plan"], dtype=float).reshape(-1, 4)
        y = np.array([data["duals"][str(b)] for b in range(len(nu.masses))], dtype=float)
        delta = float(data["final_delta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed scaling plan: {exc}") from exc
    total = float(oracle.total)
    targets = np.asarray(nu.points, dtype=float)[:, 0]
    target = entries[:, 2].astype(np.int64)
    edges = np.unique(np.r_[entries[:, 0], entries[:, 1]])
    cell = np.searchsorted(edges, entries[:, 0])
    arrangement = Arrangement(edges, oracle.interval_mass(edges[:-1], edges[1:]))
    rows = np.bincount(cell, entries[:, 3], len(arrangement))
    cols = np.bincount(target, entries[:, 3], len(targets))
    violations = _column_violations(cols, nu.masses * (total / nu.total), total)
    violations += _column_violations(rows, arrangement.masses, total, side="cell")
    report = check_delta_optimal(targets, y, oracle, arrangement, (cell, target, entries[:, 3]),
                                 delta, samples=samples, seed=seed)
    checks = {"marginals": not violations, "delta_wnn": report.ok}
    return checks, {"kind": "scaling1d", "cost": data.get("cost"),
                    "violations": _violation_lines(violations),
                    "delta_wnn": {"samples": report.samples, "violations": report.violations,
                                  "witnesses": report.witnesses}}


@main.command()
@click.argument("instance", type=click.Path(exists=True, dir_okay=False))
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Plan to audit; without it the discrete solver runs and its invariants are checked.")
@click.option("--against-exact", is_flag=True, help="Report the cost ratio to the exact optimum.")
@click.option("--eps", type=float, default=0.25, show_default=True)
@_seed_option
@click.option("--c-rho", type=float, default=C_RHO, show_default=True)
@click.option("--samples", type=int, default=10_000, show_default=True,
              help="Sample count for the 1-D delta-optimality audit.")
@click.option("--report-out", type=click.Path(dir_okay=False), default=None)
def validate(instance, plan_path, against_exact, eps, seed, c_rho, samples, report_out):
    """Audit a plan (marginals, cost ratio) or run the discrete invariant suites."""
    check_eps(eps)
    seed, source = resolve_seed(seed)
    kind = _instance_kind(instance)
    config = RunConfig("validate", [instance] + ([plan_path] if plan_path else []), eps, seed,
                       source, {"against_exact": against_exact, "c_rho": c_rho, "samples": samples},
                       {"report": report_out})
    start = time.perf_counter()
    if kind == "discrete":
        checks, result = validate_discrete(instance, plan_path, against_exact, eps, seed, c_rho)
    elif plan_path is None:
        raise InputError(f"validating a {kind} instance needs --plan")
    elif kind == "semidiscrete":
        checks, result = validate_semidiscrete(instance, plan_path)
    else:
        checks, result = validate_scaling1d(instance, plan_path, samples, seed)
    elapsed = time.perf_counter() - start
    result["checks"] = checks
    for line in result["violations"]:
        click.echo(line, err=True)
    if checks.get("marginals"):
        click.echo("marginals OK", err=True)
    write_report(report_out, config, result, {"validate_seconds": elapsed})
    failed = [name for name, ok in checks.items() if not ok]
    if not checks.get("marginals", True):
        raise InfeasibleError("plan violates the marginals")
    if failed:
        raise InvariantViolation(f"failed checks: {', '.join(failed)}")


# ---------------------------------------------------------------- bench


def _size_term(part):
    match = re.fullmatch(r"2\^(\d+)", part)
    return 2 ** int(match.group(1)) if match else int(part)


def parse_sweep(text):
    """Sizes from '64,128,256', '2^6..2^8' or 'n=2^6..2^8'."""
    text = text.strip().replace(" ", "").removeprefix("n=")
    match = re.fullmatch(r"2\^(\d+)(?:\.\.|:)(?:2\^)?(\d+)", text)
    try:
        if match:
            sizes = [2**k for k in range(int(match.group(1)), int(match.group(2)) + 1)]
        else:
            sizes = [_size_term(part) for part in text.split(",") if part]
    except ValueError as exc:
        raise InputError(f"cannot parse sweep {text!r}") from exc
    if not sizes or min(sizes) < 2:
        raise InputError("sweep sizes must be at least 2")
    return sizes


@main.command()
@click.option("--sweep", default="n=2^4..2^6", show_default=True,
              help="Sizes: '2^a..2^b' (or 'n=2^a..2^b') or a comma list.")
@click.option("-d", "--dim", type=int, default=2, show_default=True)
@click.option("--eps", type=float, default=0.25, show_default=True)
@_seed_option
@click.option("--seeds", type=int, default=1, show_default=True, help="Instances per size.")
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None,
              help="CSV output; stdout when omitted.")
def bench(sweep, dim, eps, seed, seeds, out):
    """Time the discrete solver against the exact solver over a size sweep (CSV)."""
    check_eps(eps)
    seed, _ = resolve_seed(seed)
    sizes = parse_sweep(sweep)
    rows = []
    for n in sizes:
        for k in range(seeds):
            mu, nu = gen_random(n, dim, seed=seed + k)
            start = time.perf_counter()
            result = solve_discrete(mu, nu, eps=eps, seed=seed + k)
            elapsed = time.perf_counter() - start
            _, exact = exact_ot_euclidean(mu, nu)
            ratio = result.cost / exact if exact > 0 else 1.0
            rows.append([n, f"{elapsed:.6f}", repr(float(ratio)), seed + k,
                         repr(float(result.cost)), repr(float(exact))])
    header = ["n", "time", "cost_ratio", "seed", "cost", "exact_cost"]
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if out:
            fh.close()


if __name__ == "__main__":
    main()
