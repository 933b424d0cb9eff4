"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from spdtraj.covdesc import CovDescriptor, DEFAULT_EPSILON
from spdtraj.spdcore import SpdPoint, matrix_exp
from spdtraj.align import Trajectory, build_trajectory


def random_symmetric(rng: np.random.Generator, m: int, scale: float = 1.0) -> np.ndarray:
    A = rng.standard_normal((m, m))
    return scale * (A + A.T) / 2.0


def random_spd(rng: np.random.Generator, m: int, spread: float = 1.0) -> np.ndarray:
    """SPD matrix with log-spectrum roughly in [-spread, spread]."""
    return matrix_exp(random_symmetric(rng, m, scale=spread))


def random_spd_points(rng: np.random.Generator, n: int, m: int,
                      spread: float = 1.0) -> list:
    return [SpdPoint.from_matrix(random_spd(rng, m, spread)) for _ in range(n)]


def random_trajectory(rng: np.random.Generator, length: int, m: int,
                      spread: float = 0.5, sample_id: str = "") -> Trajectory:
    pts = random_spd_points(rng, length, m, spread)
    return Trajectory(points=tuple(pts), sample_id=sample_id)


def descriptor_from_matrix(M: np.ndarray, epsilon: float = DEFAULT_EPSILON,
                           n_obs: int = 10) -> CovDescriptor:
    return CovDescriptor(matrix=np.asarray(M, dtype=np.float64),
                         epsilon=epsilon, n_obs=n_obs)


def smooth_trajectory(rng: np.random.Generator, length: int, m: int,
                      step: float = 0.1, sample_id: str = "") -> Trajectory:
    """Trajectory wandering smoothly on the manifold (small log-steps)."""
    S = random_symmetric(rng, m, scale=0.5)
    descs = []
    for _ in range(length):
        S = S + step * random_symmetric(rng, m, scale=1.0)
        descs.append(descriptor_from_matrix(matrix_exp(S)))
    return build_trajectory(descs, sample_id=sample_id)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
