"""Approximate optimal transport: discrete, semi-discrete and 1-D cost-scaling solvers."""

from .errors import InfeasibleError, InputError, InvariantViolation, OTError
from .exact import dual_certificate, exact_ot_euclidean, pd_ot
from .measures import (
    DiscreteMeasure,
    PiecewiseUniform1D,
    UniformBoxMixture,
    gen_box_mixture,
    gen_piecewise_1d,
    gen_random,
    gen_targets,
    load_instance,
    load_oracle,
    load_semidiscrete,
    save_instance,
    save_semidiscrete,
)
from .mwu import solve_discrete
from .plan import TransportPlan
from .scaling1d import run_scaling, w1_closed_form
from .semidiscrete import grid_reference, solve_semidiscrete

__all__ = [
    "DiscreteMeasure",
    "InfeasibleError",
    "InputError",
    "InvariantViolation",
    "OTError",
    "PiecewiseUniform1D",
    "TransportPlan",
    "UniformBoxMixture",
    "dual_certificate",
    "exact_ot_euclidean",
    "gen_box_mixture",
    "gen_piecewise_1d",
    "gen_random",
    "gen_targets",
    "grid_reference",
    "load_instance",
    "load_oracle",
    "load_semidiscrete",
    "pd_ot",
    "run_scaling",
    "save_instance",
    "save_semidiscrete",
    "solve_discrete",
    "solve_semidiscrete",
    "w1_closed_form",
]
