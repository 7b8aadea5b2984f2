"""Target sets as unions of half-spaces {y: y^T v_j > a_j}, scaled by b.

The original target A* has m half-spaces. Its enlargement A adds m tilted copies and d
coordinate caps, 2m+d half-spaces in total. Ruin and jump-region membership use strict
inequalities; the drift exit set Gamma is closed.
"""

from dataclasses import dataclass
from typing import Sequence
import logging

import numpy as np

from ..errors import DegenerateDirection, ValidationError
from .increments_service import IncrementModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HalfSpaceSystem:
    """Directions v_j (rows) and offsets a_j of a union of half-spaces."""
    vs: np.ndarray
    offs: np.ndarray

    @property
    def size(self) -> int:
        return self.vs.shape[0]

    @property
    def dim(self) -> int:
        return self.vs.shape[1]

    def r(self, b: float, s) -> np.ndarray:
        """max_j (s^T v_j - a_j b); accepts one state or a batch of states."""
        return r_eval(self, b, s)


@dataclass(frozen=True)
class TargetSpec:
    vstar: np.ndarray
    astar: np.ndarray
    delta: float
    beta: float
    gamma: float

    @property
    def m(self) -> int:
        return self.vstar.shape[0]

    @property
    def dim(self) -> int:
        return self.vstar.shape[1]

    def star_system(self) -> HalfSpaceSystem:
        return HalfSpaceSystem(self.vstar, self.astar)


@dataclass(frozen=True)
class EnlargedSystem(HalfSpaceSystem):
    m: int = 0


@dataclass(frozen=True)
class JumpRegion:
    """A_{b,a}(s0) expressed as thresholds on the increment: exists j, x^T v_j > u_j."""
    s0: np.ndarray
    b: float
    a: float
    directions: np.ndarray
    thresholds: np.ndarray

    def contains(self, x) -> bool:
        return bool(np.any(np.asarray(x) @ self.directions.T > self.thresholds))


def normalize_target(raw_directions: Sequence[Sequence[float]], raw_offsets: Sequence[float],
                     delta: float = 0.05, beta: float = None, gamma: float = 20.0) -> TargetSpec:
    """Rescale each (v, a) by 1/(-eta^T v) so that eta^T v* = -1 exactly."""
    vs = np.atleast_2d(np.asarray(raw_directions, dtype=float))
    offs = np.asarray(raw_offsets, dtype=float)
    if vs.shape[0] != offs.shape[0]:
        raise ValidationError(f"{vs.shape[0]} target directions but {offs.shape[0]} offsets", "target-shape")
    if np.any(offs <= 0):
        raise ValidationError("target offsets a* must be positive", "a*>0")

    drift = -vs.sum(axis=1)  # eta^T v with eta = -1
    for j, value in enumerate(drift):
        if value >= 0:
            raise DegenerateDirection(
                f"target direction {j} has eta^T v = {value} >= 0; the walk drifts away from it"
            )
    scale = 1.0 / -drift
    vstar = vs * scale[:, None]
    astar = offs * scale
    if beta is None:
        beta = 10.0 * float(astar.max())
    if not 0 < delta < 1:
        raise ValidationError(f"enlargement tilt delta must lie in (0, 1), got {delta}", "delta")
    if beta <= 0 or gamma <= 0:
        raise ValidationError("beta and gamma must be positive", "beta,gamma>0")
    return TargetSpec(vstar, astar, float(delta), float(beta), float(gamma))


def check_feasible(spec: TargetSpec, model: IncrementModel) -> None:
    """mu(A*) > 0: some atom must point into some target half-space."""
    if model.dim != spec.dim:
        raise ValidationError(f"model dimension {model.dim} != target dimension {spec.dim}", "dimension")
    if not np.any(model.projections(spec.vstar) > 0):
        raise ValidationError("no spectral atom has theta^T v* > 0, so mu(A*) = 0", "mu(A*)>0")


def enlarge(spec: TargetSpec, dim: int = None) -> EnlargedSystem:
    """Build the 2m+d half-spaces of the enlarged target."""
    dim = dim or spec.dim
    eta = -np.ones(dim)
    tilted = (spec.vstar + spec.delta * eta / (eta @ eta)) / (1.0 - spec.delta)
    vs = np.vstack([spec.vstar, tilted, np.eye(dim)])
    offs = np.concatenate([spec.astar, spec.astar, np.full(dim, spec.beta)])
    return EnlargedSystem(vs, offs, m=spec.m)


def r_eval(system: HalfSpaceSystem, b: float, s) -> np.ndarray:
    """r_b(s) = max_j (s^T v_j - a_j b); s in bA iff r_b(s) > 0."""
    s = np.asarray(s, dtype=float)
    values = s @ system.vs.T - system.offs * b
    result = values.max(axis=-1)
    return float(result) if s.ndim == 1 else result


def jump_region(system: HalfSpaceSystem, b: float, a: float, s0) -> JumpRegion:
    """A_{b,a}(s0): thresholds u_j = a (a_j b - s0^T v_j) on the next increment."""
    s0 = np.asarray(s0, dtype=float)
    thresholds = a * (system.offs * b - system.vs @ s0)
    return JumpRegion(s0, float(b), float(a), system.vs, thresholds)


def membership(region: JumpRegion, x) -> bool:
    return region.contains(x)


def gamma_exit(spec: TargetSpec, b: float, s) -> bool:
    """s in b*Gamma iff s^T eta >= gamma b."""
    return bool(-np.sum(s) >= spec.gamma * b)
