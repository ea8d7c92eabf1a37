"""Numerical laboratory for free-boundary conformal-exponent energy
minimization on half-ball domains: discrete maps and p-energies, constrained
descent solvers, the inversion-reflection construction, and bubble-tree
extraction with energy and degree bookkeeping."""

from .geometry import (AnnulusSpec, HalfBallGrid, MetricField, annulus_mask,
                       ball_mask, make_grid)
from .maps import (DiscreteMap, EnergyReport, constant_map, from_function,
                   gradient, local_energy, max_principle_check, p_energy,
                   read_map, weak_residual, write_map)
from .config import Thresholds
from .solver import (AnnulusProblem, SolveConfig, SolveError,
                     annulus_extension, decoupling_check,
                     minimize_free_boundary, neck_comparison)
from .reflection import ReflectedPair, reflect_map, reflect_metric
from .bubbletree import (BubbleRecord, EnergyLedger, SequenceSpec,
                         SyntheticBubble, concentration_function, degree,
                         detect_scale, extract_tree, lambda_star,
                         make_synthetic_sequence, neck_energy, rescale,
                         separation_check, subtract_bubbles)

__all__ = [
    "AnnulusSpec", "HalfBallGrid", "MetricField", "annulus_mask", "ball_mask",
    "make_grid", "DiscreteMap", "EnergyReport", "constant_map",
    "from_function", "gradient", "local_energy", "max_principle_check",
    "p_energy", "read_map", "weak_residual", "write_map", "Thresholds",
    "AnnulusProblem", "SolveConfig", "SolveError", "annulus_extension",
    "decoupling_check", "minimize_free_boundary", "neck_comparison",
    "ReflectedPair", "reflect_map", "reflect_metric", "BubbleRecord",
    "EnergyLedger", "SequenceSpec", "SyntheticBubble",
    "concentration_function", "degree", "detect_scale", "extract_tree",
    "lambda_star", "make_synthetic_sequence", "neck_energy", "rescale",
    "separation_check", "subtract_bubbles",
]

__version__ = "0.1.0"
