"""Mollified Lyapunov function and numerical verification of its drift inequality.

rho_b smooths the max in r_b by a log-sum-exp at temperature c0(b). d smooths x^+
with a quadratic piece on [-delta0, delta0]. H_b(s) = E[d(rho_b(s+X))] and
g_b = min(c1 H_b^2, 1). The drift check estimates J1 + J2 = E[g_b(s+X) k_hat] / g_b(s)
and compares it with 1.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import List, Optional, Tuple
import logging
import math

import numpy as np
from scipy.integrate import quad_vec
from scipy.optimize import brentq
from scipy.special import logsumexp, softmax

from ..errors import DomainViolation, PreconditionViolation, ValidationError
from ..models.schemas import DriftRow
from ..utils.rng import check_stream
from .geometry_service import HalfSpaceSystem, gamma_exit, jump_region, r_eval
from .increments_service import IncrementModel
from .kernel_service import ImportanceKernel

logger = logging.getLogger(__name__)

MIN_MC = 1_000
INNER_DRAWS = 4_000
QUAD_EPSREL = 1e-8


def proposition_constants(epsilon: float = 0.2) -> Tuple[float, float]:
    """(theta, c1) = (1/(1+eps)^2, (1+eps)^3 (1+4 eps)) for eps in (0, 1/2)."""
    if not 0 < epsilon < 0.5:
        raise ValidationError(f"epsilon must lie in (0, 1/2), got {epsilon}", "0<epsilon<1/2")
    return 1.0 / (1.0 + epsilon) ** 2, (1.0 + epsilon) ** 3 * (1.0 + 4.0 * epsilon)


@dataclass(frozen=True)
class MollifierParams:
    c0_tilde: float = 1.0
    delta0: float = 1.0
    c1: float = 1.2**3 * 1.8

    def __post_init__(self):
        if self.c0_tilde <= 0 or self.delta0 <= 0:
            raise ValidationError("c0_tilde and delta0 must be positive", "c0_tilde,delta0>0")
        if self.c1 <= 1:
            raise ValidationError(f"c1 must exceed 1, got {self.c1}", "c1>1")

    def c0(self, b: float, alpha: float) -> float:
        """c0(b) = max(b^((3-alpha)/2), c0_tilde)."""
        return max(b ** ((3.0 - alpha) / 2.0), self.c0_tilde)


# =====================
# SMOOTH MAX AND MOLLIFIER
# =====================

def _scaled_terms(system: HalfSpaceSystem, b: float, c0: float, s) -> np.ndarray:
    if c0 <= 0:
        raise DomainViolation(f"c0 must be positive, got {c0}")
    s = np.asarray(s, dtype=float)
    return (s @ system.vs.T - system.offs * b) / c0


def rho_b(system: HalfSpaceSystem, b: float, c0: float, s):
    """c0 log sum_j exp((s^T v_j - a_j b)/c0); batch-capable."""
    value = c0 * logsumexp(_scaled_terms(system, b, c0, s), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def softmax_weights(system: HalfSpaceSystem, b: float, c0: float, s) -> np.ndarray:
    return softmax(_scaled_terms(system, b, c0, s), axis=-1)


def grad_rho(system: HalfSpaceSystem, b: float, c0: float, s) -> np.ndarray:
    """sum_j w_j(s) v_j."""
    return softmax_weights(system, b, c0, s) @ system.vs


def hess_rho(system: HalfSpaceSystem, b: float, c0: float, s) -> np.ndarray:
    """(sum_j w_j v_j v_j^T - grad grad^T) / c0 at a single state."""
    w = softmax_weights(system, b, c0, s)
    g = w @ system.vs
    return ((system.vs.T * w) @ system.vs - np.outer(g, g)) / c0


def hess_rho_diagonal(system: HalfSpaceSystem, b: float, c0: float, s) -> np.ndarray:
    """sum_j w_j (1 - w_j) v_j v_j^T / c0; drops the cross terms of hess_rho."""
    w = softmax_weights(system, b, c0, s)
    return (system.vs.T * (w * (1.0 - w))) @ system.vs / c0


def d_mollify(delta0: float, x):
    x = np.asarray(x, dtype=float)
    value = np.where(x >= delta0, x, np.where(x <= -delta0, 0.0, (x + delta0) ** 2 / (4.0 * delta0)))
    return float(value) if value.ndim == 0 else value


def d_prime(delta0: float, x):
    x = np.asarray(x, dtype=float)
    value = np.where(x >= delta0, 1.0, np.where(x <= -delta0, 0.0, (x + delta0) / (2.0 * delta0)))
    return float(value) if value.ndim == 0 else value


def d_second(delta0: float, x):
    x = np.asarray(x, dtype=float)
    value = np.where(np.abs(x) < delta0, 1.0 / (2.0 * delta0), 0.0)
    return float(value) if value.ndim == 0 else value


# =====================
# LYAPUNOV FUNCTION
# =====================

@dataclass(frozen=True)
class LyapunovFunction:
    model: IncrementModel
    system: HalfSpaceSystem
    b: float
    params: MollifierParams

    @property
    def c0(self) -> float:
        return self.params.c0(self.b, self.model.alpha)

    def rho(self, s):
        return rho_b(self.system, self.b, self.c0, s)

    def d(self, x):
        return d_mollify(self.params.delta0, x)

    def H(self, states, inner: Optional[np.ndarray] = None) -> np.ndarray:
        """Deterministic H_b on a batch: quadrature when pure radial, else the average over `inner`."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.model.pure_radial:
            return H_b_quadrature(self, states)
        if inner is None:
            raise ValueError("body noise needs a shared inner sample for H_b")
        return np.array([np.mean(self.d(self.rho(s + inner))) for s in states])

    def g(self, states, inner: Optional[np.ndarray] = None) -> np.ndarray:
        """g_b = min(c1 H_b^2, 1)."""
        return np.minimum(self.params.c1 * self.H(states, inner) ** 2, 1.0)


def _draws(lyap: LyapunovFunction, n_mc: int, rng: Optional[np.random.Generator],
           draws: Optional[np.ndarray]) -> np.ndarray:
    if draws is not None:
        return draws
    if n_mc < MIN_MC:
        raise ValidationError(f"n_mc must be at least {MIN_MC}, got {n_mc}", "n_mc>=1000")
    return lyap.model.sample_many(n_mc, rng)


def H_b(lyap: LyapunovFunction, s, n_mc: int = 10_000, rng: Optional[np.random.Generator] = None,
        draws: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Monte Carlo E[d(rho_b(s+X))] and its standard error."""
    x = _draws(lyap, n_mc, rng, draws)
    values = lyap.d(lyap.rho(np.asarray(s, dtype=float) + x))
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))


def H_b_quadrature(lyap: LyapunovFunction, states) -> np.ndarray:
    """Per-atom adaptive quadrature of H_b for the pure-radial model, vectorized over states.

    Substituting r = xm w^(-1/(alpha-1)) maps the radial Pareto integral to w in (0, 1]
    with a bounded integrand.
    """
    model = lyap.model
    if not model.pure_radial:
        raise DomainViolation("H_b quadrature needs body_radius = 0")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    base = states + model.shift
    power = 1.0 / (model.alpha - 1.0)
    scale = model.alpha / (model.alpha - 1.0)
    directions, weights = model.spectral.directions, model.spectral.weights

    def integrand(w):
        radius = model.xm * w ** (-power)
        total = np.zeros(len(states))
        for theta, phi in zip(directions, weights):
            total += phi * lyap.d(lyap.rho(base + radius * theta))
        return scale * w**power * total

    value, _ = quad_vec(integrand, 0.0, 1.0, epsrel=QUAD_EPSREL, norm="max",
                        points=_support_breakpoints(lyap, base))
    return np.asarray(value)


def _support_breakpoints(lyap: LyapunovFunction, base: np.ndarray) -> Optional[np.ndarray]:
    """Geometric breakpoints in w down to the smallest w where d(rho_b) can be nonzero.

    d(rho_b(y)) = 0 once r_b(y) <= -delta0 - c0 log L.
    """
    model, system = lyap.model, lyap.system
    floor = -lyap.params.delta0 - lyap.c0 * math.log(system.size)
    levels = base @ system.vs.T - system.offs * lyap.b
    proj = model.projections(system.vs)
    with np.errstate(divide="ignore", invalid="ignore"):
        crossing = np.where(proj[None] > 0, (floor - levels[:, None, :]) / proj[None], np.inf).min(axis=2)
    radius = np.maximum(crossing[np.isfinite(crossing)], model.xm)
    if radius.size == 0:
        return None
    w_min = float((radius.max() / model.xm) ** (1.0 - model.alpha))
    if w_min >= 1.0:
        return None
    return np.geomspace(w_min, 1.0, 24)[:-1]


def grad_H_b(lyap: LyapunovFunction, s, n_mc: int = 10_000, rng: Optional[np.random.Generator] = None,
             draws: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Monte Carlo E[d'(rho_b(s+X)) grad rho_b(s+X)] with componentwise standard errors."""
    x = _draws(lyap, n_mc, rng, draws)
    y = np.asarray(s, dtype=float) + x
    slopes = d_prime(lyap.params.delta0, lyap.rho(y))
    values = slopes[:, None] * grad_rho(lyap.system, lyap.b, lyap.c0, y)
    return values.mean(axis=0), values.std(axis=0, ddof=1) / math.sqrt(len(values))


def hess_H_b(lyap: LyapunovFunction, s, n_mc: int = 10_000, rng: Optional[np.random.Generator] = None,
             draws: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Monte Carlo E[d'' grad grad^T + d' hess rho] at s+X."""
    x = _draws(lyap, n_mc, rng, draws)
    y = np.asarray(s, dtype=float) + x
    vs, c0 = lyap.system.vs, lyap.c0
    levels = lyap.rho(y)
    w = softmax_weights(lyap.system, lyap.b, c0, y)
    grads = w @ vs
    hess = (np.einsum("nl,li,lj->nij", w, vs, vs) - np.einsum("ni,nj->nij", grads, grads)) / c0
    values = (d_second(lyap.params.delta0, levels)[:, None, None] * np.einsum("ni,nj->nij", grads, grads)
              + d_prime(lyap.params.delta0, levels)[:, None, None] * hess)
    return values.mean(axis=0), values.std(axis=0, ddof=1) / math.sqrt(len(values))


# =====================
# DRIFT VERIFICATION
# =====================

def drift_check(kernel: ImportanceKernel, lyap: LyapunovFunction, s, n_mc: int,
                rng: np.random.Generator, z: float = 3.0) -> DriftRow:
    """Estimate J1 and (1-p_b) J2 at s and test J1 + J2 <= 1 + z * std_error.

    J1 is estimated from conditional jumps into A_{b,a}(s), (1-p_b)J2 from nominal
    increments that miss it.
    """
    s = np.asarray(s, dtype=float)
    b = kernel.b
    if n_mc < MIN_MC:
        raise ValidationError(f"n_mc must be at least {MIN_MC}, got {n_mc}", "n_mc>=1000")
    if r_eval(kernel.system, b, s) > -kernel.params.delta2 * b or gamma_exit(kernel.target, b, s):
        raise PreconditionViolation(f"state {s.tolist()} lies outside r_b(s) <= -delta2 b, s not in b*Gamma")

    model = kernel.model
    inner = None if model.pure_radial else model.sample_many(INNER_DRAWS, rng)
    g_s = float(lyap.g(s, inner)[0])
    if g_s >= 1:
        raise PreconditionViolation(f"g_b(s) = 1 at {s.tolist()}; the drift inequality is trivial there")

    region = jump_region(kernel.system, b, kernel.params.a, s)
    prob = model.tail_union_prob(region.directions, region.thresholds)
    p = kernel.p_b(s)

    if prob > 0:
        jumps = np.array([model.sample_conditional_jump(s, region, rng) for _ in range(n_mc)])
        ratios = lyap.g(s + jumps, inner) / g_s
        factor = prob * prob / (p + (1.0 - p) * prob)
        j1 = factor * float(ratios.mean())
        se1 = factor * float(ratios.std(ddof=1)) / math.sqrt(n_mc)
    else:
        j1, se1 = 0.0, 0.0

    x = model.sample_many(n_mc, rng)
    outside = ~np.any(x @ region.directions.T > region.thresholds, axis=1)
    misses = lyap.g(s + x, inner) / g_s * outside
    j2_scaled = float(misses.mean())
    se2 = float(misses.std(ddof=1)) / math.sqrt(n_mc)

    if p < 1:
        total = j1 + j2_scaled / (1.0 - p)
        std_error = math.sqrt(se1**2 + (se2 / (1.0 - p)) ** 2)
    else:
        total = j1 + (math.inf if j2_scaled > 0 else 0.0)
        std_error = se1
    passed = total <= 1.0 + z * std_error
    logger.debug(f"Drift at {s.tolist()}: J1={j1:.6f} J2_scaled={j2_scaled:.6f} sum={total:.6f} "
                 f"se={std_error:.2e} p_b={p:.4f}")
    return DriftRow(state=s.tolist(), J1=j1, J2_scaled=j2_scaled, total=total,
                    std_error=std_error, passed=passed)


def saturation_level(lyap: LyapunovFunction, direction=None, inner: Optional[np.ndarray] = None) -> float:
    """Smallest r_b level along the ray t*u where c1 H_b^2 reaches 1."""
    u = np.asarray(lyap.system.vs[0] if direction is None else direction, dtype=float)
    u = u / np.linalg.norm(u)

    def excess(t: float) -> float:
        return float(lyap.params.c1 * lyap.H(t * u, inner)[0] ** 2 - 1.0)

    if excess(0.0) >= 0:
        return r_eval(lyap.system, lyap.b, np.zeros_like(u))
    upper = lyap.b
    for _ in range(60):
        if excess(upper) > 0:
            break
        upper *= 2.0
    else:
        raise DomainViolation("c1 H_b^2 never reaches 1 along the ray")
    t_star = brentq(excess, 0.0, upper, xtol=1e-9 * lyap.b)
    level = r_eval(lyap.system, lyap.b, t_star * u)
    logger.info(f"Saturation level at b={lyap.b}: r_b = {level:.6g} (t* = {t_star:.6g})")
    return level


def region_grid(kernel: ImportanceKernel, n_grid: int) -> np.ndarray:
    """Deterministic states -tau b 1 + lateral offsets, kept when they lie in the drift region."""
    b, dim = kernel.b, kernel.model.dim
    depth = np.linspace(0.0, 0.5 * kernel.target.gamma / dim, n_grid)
    lateral = np.zeros(dim)
    if dim > 1:
        lateral[0], lateral[1] = 1.0, -1.0
        lateral /= np.linalg.norm(lateral)
    offsets = np.resize([0.0, 0.25, -0.25], n_grid)
    states = -depth[:, None] * b * np.ones(dim) + offsets[:, None] * b * lateral
    keep = [
        r_eval(kernel.system, b, s) <= -kernel.params.delta2 * b and not gamma_exit(kernel.target, b, s)
        for s in states
    ]
    return states[np.array(keep, dtype=bool)]


# =====================
# SERVICE
# =====================

def _drift_task(kernel: ImportanceKernel, lyap: LyapunovFunction, n_mc: int, seed: int, item) -> DriftRow:
    index, state = item
    return drift_check(kernel, lyap, state, n_mc, check_stream(seed, index))


class LyapunovService:
    """Drift checks of the mollified Lyapunov function over a set of states."""

    def function(self, kernel: ImportanceKernel, params: MollifierParams) -> LyapunovFunction:
        return LyapunovFunction(kernel.model, kernel.system, kernel.b, params)

    def states(self, kernel: ImportanceKernel, scaled_states=None, n_grid: int = 10) -> np.ndarray:
        """Explicit states given in units of b, or the deterministic drift-region grid."""
        if scaled_states:
            states = np.asarray(scaled_states, dtype=float) * kernel.b
        else:
            states = region_grid(kernel, n_grid)
        if len(states) == 0:
            raise PreconditionViolation("no grid state lies in the drift region")
        return states

    def check_states(self, kernel: ImportanceKernel, lyap: LyapunovFunction, states: np.ndarray, n_mc: int,
                     seed: int, workers: int = 1) -> List[DriftRow]:
        """One drift row per state; state i always uses stream i, whatever the worker count."""
        task = partial(_drift_task, kernel, lyap, n_mc, seed)
        items = list(enumerate(states))
        if workers > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                rows = list(executor.map(task, items))
        else:
            rows = [task(item) for item in items]
        failed = sum(not row.passed for row in rows)
        if failed:
            logger.warning(f"Drift inequality failed at {failed} of {len(rows)} states")
        return rows

    def saturation(self, lyap: LyapunovFunction, seed: int) -> float:
        """Saturation level; with body noise H_b is averaged over a fixed set of inner draws."""
        model = lyap.model
        inner = None if model.pure_radial else model.sample_many(INNER_DRAWS, check_stream(seed))
        return saturation_level(lyap, inner=inner)


# Singleton instance
_lyapunov_service = None

def get_lyapunov_service() -> LyapunovService:
    global _lyapunov_service
    if _lyapunov_service is None:
        _lyapunov_service = LyapunovService()
    return _lyapunov_service
