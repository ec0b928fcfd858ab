"""Benchmark systems: unstable upper-triangular dynamics with a scalar input."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInput, UnknownDimension
from ..imitation import InitialDistribution
from ..numerics import LinearSystem
from ..sets import Polytope

# upper-triangular entries of the published matrices; column j > i holds _ROW[j - 1]
_PAPER_ROWS = {
    3: [0.86075747, 0.4110535],
    5: [0.86075747, 0.4110535, 0.17953273, -0.3053808],
}


def paper_matrix(d: int) -> np.ndarray:
    if d not in _PAPER_ROWS:
        raise UnknownDimension(f"no published matrix for d={d}; available: {sorted(_PAPER_ROWS)}")
    row = _PAPER_ROWS[d]
    A = 1.1 * np.eye(d)
    for i in range(d):
        for j in range(i + 1, d):
            A[i, j] = row[j - 1]
    return A


def random_matrix(d: int, seed: int) -> np.ndarray:
    """Diagonal 1.1, strictly upper entries uniform on ``[-2, 2]``."""
    if d < 2:
        raise InvalidInput("dimension must be at least 2")
    rng = np.random.default_rng(seed)
    A = 1.1 * np.eye(d)
    iu = np.triu_indices(d, 1)
    A[iu] = rng.uniform(-2.0, 2.0, iu[0].size)
    return A


def make_benchmark_system(d: int, source: str = "paper-matrix", seed: int = 0, x_bound: float = 100.0,
                          u_bound: float = 10.0, init_box=(8.0, 10.0)):
    """Return ``(LinearSystem, X, U, D)`` for the benchmark of dimension ``d``."""
    if source == "paper-matrix":
        A = paper_matrix(d)
    elif source == "seeded-random":
        A = random_matrix(d, seed)
    else:
        raise InvalidInput(f"unknown system source {source!r}")
    B = np.zeros((d, 1))
    B[-1, 0] = 1.0
    sys = LinearSystem(A, B)
    X = Polytope.symmetric_box(x_bound, d)
    U = Polytope.symmetric_box(u_bound, 1)
    D = InitialDistribution(np.full(d, init_box[0]), np.full(d, init_box[1]))
    return sys, X, U, D
