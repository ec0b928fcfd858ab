"""Imitation learning of (robust) MPC controllers for constrained linear systems."""

from .errors import (ConfigError, DegenerateLevel, EmptyTightenedSet, ExpertInfeasible, ImitMpcError,
                     InfeasibleState, InvalidInput, NonConvergence, NonFiniteLoss, SingularMatrix,
                     UnknownDimension, UnstableMatrix, ZeroBaseline)
from .numerics import LinearSystem, QuadCost, solve_dare, spectral_radius, stability_envelope
from .sets import Ball, EllipsoidLevelSet, Polytope, Zonotope

__version__ = "0.1.0"

__all__ = [
    "Ball", "ConfigError", "DegenerateLevel", "EllipsoidLevelSet", "EmptyTightenedSet",
    "ExpertInfeasible", "ImitMpcError", "InfeasibleState", "InvalidInput", "LinearSystem",
    "NonConvergence", "NonFiniteLoss", "Polytope", "QuadCost", "SingularMatrix", "UnknownDimension",
    "UnstableMatrix", "ZeroBaseline", "Zonotope", "solve_dare", "spectral_radius", "stability_envelope",
]
