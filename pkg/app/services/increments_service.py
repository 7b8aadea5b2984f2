"""Regularly varying increments: X = R*Theta + body_radius*U + shift.

R is Pareto(alpha, xm), Theta is drawn from a discrete spectral measure and U is
uniform on the unit ball. The shift is solved so that E[X] = eta = -1.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple
import logging
import math

import numpy as np
from scipy.stats import norm, qmc

from ..errors import DomainViolation, ValidationError, ZeroMassRegion
from ..utils.envelope import lower_envelope, power_tail_integral

logger = logging.getLogger(__name__)

NORM_TOL = 1e-12
TAIL_PROB_TOL = 1e-5
BALL_SEED = 20240611
BALL_REPLICATES = 8
BALL_MIN_LOG2 = 10
BALL_MAX_LOG2 = 17


@lru_cache(maxsize=4)
def _ball_nodes(dim: int) -> np.ndarray:
    """Independently scrambled Sobol point sets mapped onto the unit ball, shape (R, 2^max, d).

    Every power-of-two prefix of a replicate is itself a balanced point set.
    """
    replicates = []
    for child in np.random.SeedSequence(BALL_SEED).spawn(BALL_REPLICATES):
        engine = qmc.Sobol(d=dim + 1, scramble=True, seed=np.random.default_rng(child))
        cube = engine.random_base2(BALL_MAX_LOG2)
        gauss = norm.ppf(np.clip(cube[:, :dim], 1e-12, 1 - 1e-12))
        gauss /= np.linalg.norm(gauss, axis=1, keepdims=True)
        replicates.append(gauss * cube[:, dim:] ** (1.0 / dim))
    return np.stack(replicates)


def ball_cubature_nodes(dim: int, log2: int = 12) -> np.ndarray:
    """A fixed 2^log2-node cubature rule for the uniform law on the unit ball."""
    return _ball_nodes(dim)[0, : 2**log2]


def _uniform_ball(rng: np.random.Generator, dim: int, n: Optional[int] = None) -> np.ndarray:
    shape = (dim,) if n is None else (n, dim)
    g = rng.standard_normal(shape)
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    radius = rng.random() if n is None else rng.random((n, 1))
    return g * radius ** (1.0 / dim)


@dataclass(frozen=True)
class SpectralMeasure:
    """Discrete angular measure: unit directions with probability weights."""
    directions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValidationError("spectral directions must have unit norm", "unit-directions")
        if np.any(self.weights <= 0):
            raise ValidationError("spectral weights must be strictly positive", "positive-weights")
        if abs(self.weights.sum() - 1.0) > NORM_TOL:
            raise ValidationError(f"spectral weights sum to {self.weights.sum()!r}, not 1", "weights-sum-to-one")

    @classmethod
    def from_atoms(cls, directions, weights) -> "SpectralMeasure":
        """Normalize raw directions; weights are kept as given."""
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValidationError("spectral direction of zero length", "unit-directions")
        return cls(dirs / norms, np.asarray(weights, dtype=float))

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def size(self) -> int:
        return self.directions.shape[0]

    @property
    def mean_direction(self) -> np.ndarray:
        return self.weights @ self.directions


@dataclass(frozen=True)
class IncrementModel:
    """Immutable increment law; safe to share between workers."""
    alpha: float
    xm: float
    spectral: SpectralMeasure
    body_radius: float
    shift: np.ndarray

    @classmethod
    def build(cls, alpha: float, xm: float, spectral: SpectralMeasure,
              body_radius: float = 0.0) -> "IncrementModel":
        """Create the model and solve the centering shift from E[X] = -1."""
        if alpha <= 1:
            raise ValidationError(f"tail index must exceed 1, got {alpha}", "alpha>1")
        if xm <= 0:
            raise ValidationError(f"Pareto scale must be positive, got {xm}", "xm>0")
        if body_radius < 0:
            raise ValidationError("body radius must be nonnegative", "body_radius>=0")
        eta = -np.ones(spectral.dim)
        mean_radius = alpha * xm / (alpha - 1.0)
        shift = eta - mean_radius * spectral.mean_direction
        logger.debug(f"Increment model alpha={alpha} xm={xm} atoms={spectral.size} shift={shift}")
        return cls(float(alpha), float(xm), spectral, float(body_radius), shift)

    @property
    def dim(self) -> int:
        return self.spectral.dim

    @property
    def eta(self) -> np.ndarray:
        return -np.ones(self.dim)

    @property
    def pure_radial(self) -> bool:
        return self.body_radius == 0.0

    @property
    def mean_radius(self) -> float:
        return self.alpha * self.xm / (self.alpha - 1.0)

    def tail_norm(self, b: float) -> float:
        """Leading-order P(||X||_2 > b) = xm^alpha b^-alpha."""
        return self.xm**self.alpha * b ** (-self.alpha)

    def projections(self, directions) -> np.ndarray:
        """theta_k^T v_j for every atom k and direction j, shape (K, L)."""
        return self.spectral.directions @ np.atleast_2d(directions).T

    # =====================
    # SAMPLING
    # =====================

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw of X."""
        return self.sample_with_noise(rng)[0]

    def sample_with_noise(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """One draw of X together with its body-noise component (zero without body noise)."""
        x = self._sample_radial(rng) + self.shift
        noise = self._sample_noise(rng)
        return x + noise, noise

    def _sample_radial(self, rng: np.random.Generator) -> np.ndarray:
        k = int(np.searchsorted(np.cumsum(self.spectral.weights), rng.random(), side="right"))
        k = min(k, self.spectral.size - 1)
        radius = self.xm * (1.0 - rng.random()) ** (-1.0 / self.alpha)
        return radius * self.spectral.directions[k]

    def _sample_noise(self, rng: np.random.Generator) -> np.ndarray:
        if self.body_radius > 0:
            return self.body_radius * _uniform_ball(rng, self.dim)
        return np.zeros(self.dim)

    def sample_many(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n independent draws of X, shape (n, d)."""
        k = rng.choice(self.spectral.size, size=n, p=self.spectral.weights)
        radius = self.xm * (1.0 - rng.random(n)) ** (-1.0 / self.alpha)
        x = radius[:, None] * self.spectral.directions[k] + self.shift
        if self.body_radius > 0:
            x += self.body_radius * _uniform_ball(rng, self.dim, n)
        return x

    # =====================
    # TAIL EVENTS
    # =====================

    def _radial_bounds(self, directions: np.ndarray, shifted: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-atom event {r: exists j, r theta_k^T v_j > w_j} as (r < sigma_k) or (r > rho_k).

        shifted has shape (..., L); the bounds come back with shape (..., K).
        """
        proj = self.projections(directions)
        w = np.asarray(shifted, dtype=float)[..., None, :]
        w, proj = np.broadcast_arrays(w, proj)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = w / proj
        rho = np.where(proj > 0, ratio, np.inf).min(axis=-1)
        sigma = np.where(proj < 0, ratio, -np.inf).max(axis=-1)
        # A direction orthogonal to the atom is crossed for every r once its threshold is negative.
        always = np.any((proj == 0) & (w < 0), axis=-1)
        sigma = np.where(always, np.inf, sigma)
        return sigma, rho

    def _radial_masses(self, sigma: np.ndarray, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pareto mass of the lower segment and upper ray, and whether they cover everything."""
        a, xm = self.alpha, self.xm
        with np.errstate(divide="ignore", over="ignore"):
            lower = np.where(sigma > xm, 1.0 - (xm / np.maximum(sigma, xm)) ** a, 0.0)
            upper = np.where(rho > xm, (xm / np.maximum(rho, xm)) ** a, 1.0)
        covers = sigma > rho
        return lower, upper, covers

    def _radial_prob(self, directions: np.ndarray, shifted: np.ndarray) -> np.ndarray:
        sigma, rho = self._radial_bounds(directions, shifted)
        lower, upper, covers = self._radial_masses(sigma, rho)
        per_atom = np.where(covers, 1.0, np.minimum(lower + upper, 1.0))
        return per_atom

    def tail_union_prob(self, directions, thresholds, tol: float = TAIL_PROB_TOL) -> float:
        """P(exists j: X^T v_j > u_j).

        Exact for the pure-radial model. With body noise the radial probability is averaged
        over the noise by randomized Sobol cubature; the node count doubles until the
        standard error across replicates is at most tol.
        """
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        thresholds = np.atleast_1d(np.asarray(thresholds, dtype=float))
        if np.any(np.isnan(thresholds)) or np.any(thresholds == -np.inf):
            raise DomainViolation(f"thresholds must be finite or +inf, got {thresholds}")
        shifted = thresholds - directions @ self.shift
        if self.pure_radial:
            prob = self.spectral.weights @ self._radial_prob(directions, shifted)
        else:
            prob = self._noise_average(directions, shifted, tol)
        return float(np.clip(prob, 0.0, 1.0))

    def _noise_average(self, directions: np.ndarray, shifted: np.ndarray, tol: float) -> float:
        nodes = _ball_nodes(self.dim)
        sums = np.zeros(nodes.shape[0])
        start, log2 = 0, BALL_MIN_LOG2
        while True:
            stop = 2**log2
            for r, block in enumerate(nodes[:, start:stop]):
                reach = self.body_radius * block @ directions.T
                sums[r] += float((self._radial_prob(directions, shifted - reach) @ self.spectral.weights).sum())
            estimates = sums / stop
            std_error = float(estimates.std(ddof=1)) / math.sqrt(len(estimates))
            if std_error <= tol or log2 == BALL_MAX_LOG2:
                break
            start, log2 = stop, log2 + 1
        if std_error > tol:
            logger.warning(f"Body-noise cubature stopped at 2^{log2} nodes with std error {std_error:.2e} > {tol:.0e}")
        return float(estimates.mean())

    def noise_region_prob(self, directions, thresholds, noise) -> float:
        """P(exists j: (R Theta + c + noise)^T v_j > u_j) for a fixed body-noise value."""
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        shifted = np.asarray(thresholds, dtype=float) - directions @ (self.shift + noise)
        return float(np.clip(self.spectral.weights @ self._radial_prob(directions, shifted), 0.0, 1.0))

    def _sample_radial_jump(self, directions: np.ndarray, shifted: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
        """R*Theta conditioned on exists j: R theta^T v_j > w_j (exact two-stage sampler)."""
        sigma, rho = self._radial_bounds(directions, shifted)
        lower, upper, covers = self._radial_masses(sigma, rho)
        mass = self.spectral.weights * np.where(covers, 1.0, np.minimum(lower + upper, 1.0))
        total = mass.sum()
        if total <= 0:
            raise ZeroMassRegion("jump region has zero probability under the increment law")

        k = int(np.searchsorted(np.cumsum(mass) / total, rng.random(), side="right"))
        k = min(k, self.spectral.size - 1)
        a, xm = self.alpha, self.xm
        if covers[k]:
            radius = xm * (1.0 - rng.random()) ** (-1.0 / a)
        elif rng.random() * (lower[k] + upper[k]) < lower[k]:
            # Pareto truncated to [xm, sigma)
            radius = xm * (1.0 - rng.random() * lower[k]) ** (-1.0 / a)
        else:
            radius = max(rho[k], xm) * (1.0 - rng.random()) ** (-1.0 / a)
        return radius * self.spectral.directions[k]

    def sample_conditional_jump(self, s0: np.ndarray, region, rng: np.random.Generator) -> np.ndarray:
        """Exact draw from Law(X | s0 + X in region)."""
        directions, thresholds = region.directions, region.thresholds
        base = thresholds - directions @ self.shift
        while True:
            if self.pure_radial:
                x = self._sample_radial_jump(directions, base, rng) + self.shift
            else:
                x = self._sample_body_jump(directions, base, rng)
            # Ties on the boundary have probability zero; redraw if rounding produced one.
            if region.contains(x):
                return x

    def sample_jump_given_noise(self, region, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
        """Body noise from its nominal law, then R*Theta conditioned on landing in region.

        Returns (x, noise, prob) with prob = noise_region_prob(region, noise). When prob is 0
        the radial part keeps its nominal law and x misses the region.
        """
        noise = self._sample_noise(rng)
        directions = region.directions
        shifted = region.thresholds - directions @ (self.shift + noise)
        prob = float(np.clip(self.spectral.weights @ self._radial_prob(directions, shifted), 0.0, 1.0))
        if prob <= 0:
            return self._sample_radial(rng) + self.shift + noise, noise, 0.0
        while True:
            x = self._sample_radial_jump(directions, shifted, rng) + self.shift + noise
            if region.contains(x):
                return x, noise, prob

    def _sample_body_jump(self, directions: np.ndarray, base: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
        """Rejection over the body noise U, bounded by the most favourable shift on the ball."""
        reach = self.body_radius * np.linalg.norm(directions, axis=1)
        bound = self.spectral.weights @ self._radial_prob(directions, base - reach)
        if bound <= 0:
            raise ZeroMassRegion("jump region has zero probability under the increment law")
        while True:
            noise = self.body_radius * _uniform_ball(rng, self.dim)
            shifted = base - directions @ noise
            accept = self.spectral.weights @ self._radial_prob(directions, shifted)
            if rng.random() * bound < accept:
                return self._sample_radial_jump(directions, shifted, rng) + noise + self.shift

    # =====================
    # MOMENTS
    # =====================

    def covariance(self) -> np.ndarray:
        """Var(X) from the model moments; needs alpha > 2."""
        if self.alpha <= 2:
            raise DomainViolation(f"Var(X) is infinite for alpha={self.alpha} <= 2")
        second = self.alpha * self.xm**2 / (self.alpha - 2.0)
        dirs, w = self.spectral.directions, self.spectral.weights
        outer = (dirs * w[:, None]).T @ dirs
        mean = self.mean_radius * self.spectral.mean_direction
        cov = second * outer - np.outer(mean, mean)
        if self.body_radius > 0:
            cov += self.body_radius**2 / (self.dim + 2.0) * np.eye(self.dim)
        return cov


# =====================
# LIMITING MEASURE
# =====================

def _shifted_offsets(vs: np.ndarray, offs: np.ndarray, z: Optional[np.ndarray]) -> np.ndarray:
    offs = np.asarray(offs, dtype=float)
    if z is None:
        return offs
    return offs - vs @ np.asarray(z, dtype=float)


def kappa_polar(model: IncrementModel, vs, offs, t, z=None):
    """mu({y: max_j (y^T v_j - a_j + z^T v_j) > t}) for the discrete spectral measure.

    Normalized against P(||X||_2 > b), so no xm^alpha factor appears.
    """
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    base = _shifted_offsets(vs, offs, z)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    den = base[None, :] + t_arr[:, None]
    if np.any(den <= 0):
        raise DomainViolation("kappa denominators a_j - z^T v_j + t must be positive")
    proj = np.maximum(model.projections(vs), 0.0)
    ratio = (proj[None, :, :] / den[:, None, :]).max(axis=2)
    values = (ratio**model.alpha) @ model.spectral.weights
    return float(values[0]) if np.ndim(t) == 0 else values


def kappa_tail_integral(model: IncrementModel, vs, offs, t=0.0, z=None):
    """Closed-form integral of kappa over [t, inf), vectorized in t >= 0."""
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    base = _shifted_offsets(vs, offs, z)
    if np.any(base <= 0):
        raise DomainViolation("kappa denominators a_j - z^T v_j must be positive")
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0):
        raise DomainViolation("kappa tail integral needs t >= 0")

    total = np.zeros_like(t_arr)
    for k, proj in enumerate(model.projections(vs)):
        active = proj > 0
        if not np.any(active):
            continue
        # max_j (P_kj / (a_j + u))^alpha is the -alpha power of the lower envelope of (a_j + u)/P_kj
        env = lower_envelope(base[active] / proj[active], 1.0 / proj[active], 0.0)
        total += model.spectral.weights[k] * power_tail_integral(env, model.alpha, t_arr)
    return float(total[0]) if np.ndim(t) == 0 else total
