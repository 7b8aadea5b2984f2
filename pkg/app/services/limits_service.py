"""Asymptotic conditional laws of the ruin path and the tests against simulated paths.

With G(t) the integral of kappa over [t, inf), the hazard of the scaled ruin time
is kappa/G, so P(Z* > t) = G(t)/G(0). Homogeneity of the limit measure turns the
jump-time hazard into a power of the same ratio: P(Z_{a,theta} > t) = (G(t)/G(0))^(theta a^-alpha).
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.integrate import quad
from scipy.stats import chisquare, kstest, norm

from ..errors import DomainViolation, InsufficientSample
from ..models.schemas import LimitLawReport
from .geometry_service import HalfSpaceSystem
from .increments_service import IncrementModel, kappa_polar, kappa_tail_integral
from .kernel_service import ImportanceKernel, PathRecord

logger = logging.getLogger(__name__)

GRID_LO, GRID_HI, GRID_POINTS = 1e-3, 1e3, 2000
MIN_PATHS = 1_000
SIGNIFICANCE = 0.01
BISECTION_STEPS = 200


@dataclass(frozen=True)
class HazardTable:
    """Survival, hazard and kappa of a scaled ruin or jump time on a log grid (t = 0 first)."""
    model: IncrementModel
    system: HalfSpaceSystem
    exponent: float
    t: np.ndarray
    kappa: np.ndarray
    tail: np.ndarray
    hazard: np.ndarray
    survival: np.ndarray

    @property
    def tail_at_zero(self) -> float:
        return float(self.tail[0])

    def survival_at(self, t) -> np.ndarray:
        """Exact survival at arbitrary t >= 0."""
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        ratio = kappa_tail_integral(self.model, self.system.vs, self.system.offs, t) / self.tail_at_zero
        return np.clip(ratio, 0.0, 1.0) ** self.exponent

    def hazard_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        kappa = kappa_polar(self.model, self.system.vs, self.system.offs, t)
        return self.exponent * kappa / kappa_tail_integral(self.model, self.system.vs, self.system.offs, t)

    def cdf(self, t) -> np.ndarray:
        return 1.0 - self.survival_at(t)


def build_hazard(model: IncrementModel, system: HalfSpaceSystem, a_contraction: float = 1.0,
                 theta: float = 1.0, points: int = GRID_POINTS) -> HazardTable:
    """Hazard table for Z* (a = theta = 1) or for the jump time Z_{a,theta}."""
    if model.alpha <= 1:
        raise DomainViolation("hazard tables need alpha > 1")
    grid = np.concatenate([[0.0], np.geomspace(GRID_LO, GRID_HI, points)])
    kappa = kappa_polar(model, system.vs, system.offs, grid)
    tail = kappa_tail_integral(model, system.vs, system.offs, grid)
    exponent = theta * a_contraction ** (-model.alpha)
    return HazardTable(
        model=model,
        system=system,
        exponent=exponent,
        t=grid,
        kappa=kappa,
        tail=tail,
        hazard=exponent * kappa / tail,
        survival=(tail / tail[0]) ** exponent,
    )


def hazard_quadrature_gap(table: HazardTable, t_values: Sequence[float]) -> float:
    """Max |exp(-int_0^t hazard) - survival(t)| with the hazard integrated by scipy quad."""
    worst = 0.0
    for t in t_values:
        integral, _ = quad(lambda u: float(table.hazard_at(u)), 0.0, t, epsrel=1e-10, limit=200)
        worst = max(worst, abs(math.exp(-integral) - float(table.survival_at(t))))
    return worst


def survival_tail_slope(table: HazardTable) -> float:
    """log-log slope of the survival over the last decade of the grid."""
    tail = table.t >= GRID_HI / 10.0
    slope, _ = np.polyfit(np.log(table.t[tail]), np.log(table.survival[tail]), 1)
    return float(slope)


# =====================
# SAMPLING
# =====================

def _inverse_survival(table: HazardTable, u: np.ndarray) -> np.ndarray:
    """Solve survival(t) = u by bisection, vectorized over u."""
    lo = np.zeros_like(u)
    hi = np.full_like(u, GRID_HI)
    while True:
        short = table.survival_at(hi) > u
        if not np.any(short):
            break
        hi = np.where(short, hi * 10.0, hi)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        above = table.survival_at(mid) > u
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= 1e-12 * np.maximum(hi, 1.0)):
            break
    return 0.5 * (lo + hi)


def sample_zstar(table: HazardTable, rng: np.random.Generator, n: Optional[int] = None):
    """Z* (or Z_{a,theta}, depending on the table) by inverse survival."""
    u = rng.random(1 if n is None else n)
    draws = _inverse_survival(table, 1.0 - u)
    return float(draws[0]) if n is None else draws


def sample_z_a_theta(table: HazardTable, rng: np.random.Generator, n: Optional[int] = None):
    """Jump-time draws; the table must come from build_hazard with a < 1 or theta < 1."""
    return sample_zstar(table, rng, n)


@dataclass(frozen=True)
class OvershootLaw:
    """Y*(z): atom k with probability proportional to phi_k rho_k(z)^-alpha, radius Pareto above rho_k(z)."""
    z: float
    radii: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, model: IncrementModel, star: HalfSpaceSystem, z: float) -> "OvershootLaw":
        if z < 0:
            raise DomainViolation(f"overshoot level must be nonnegative, got {z}")
        proj = model.projections(star.vs)
        with np.errstate(divide="ignore"):
            ratios = np.where(proj > 0, (star.offs + z) / np.where(proj > 0, proj, 1.0), np.inf)
        radii = ratios.min(axis=1)
        mass = model.spectral.weights * np.where(np.isinf(radii), 0.0, radii ** (-model.alpha))
        if mass.sum() <= 0:
            raise DomainViolation("no atom reaches the target, the overshoot law is undefined")
        return cls(float(z), radii, mass / mass.sum())


def sample_ystar(model: IncrementModel, star: HalfSpaceSystem, z: float, rng: np.random.Generator,
                 n: Optional[int] = None) -> np.ndarray:
    law = OvershootLaw.build(model, star, z)
    size = 1 if n is None else n
    atoms = rng.choice(len(law.weights), size=size, p=law.weights)
    radius = law.radii[atoms] * (1.0 - rng.random(size)) ** (-1.0 / model.alpha)
    draws = radius[:, None] * model.spectral.directions[atoms]
    return draws[0] if n is None else draws


# =====================
# CHECKS
# =====================

def homogeneity_gap(model: IncrementModel, system: HalfSpaceSystem, a: float, s_values) -> float:
    """Max relative gap in kappa_{a a}(a s) = a^-alpha kappa_a(s)."""
    s_values = np.asarray(s_values, dtype=float)
    contracted = kappa_polar(model, system.vs, a * system.offs, a * s_values)
    scaled = a ** (-model.alpha) * kappa_polar(model, system.vs, system.offs, s_values)
    return float(np.max(np.abs(contracted - scaled) / np.maximum(np.abs(scaled), 1e-300)))


def kappa_gap(model: IncrementModel, enlarged: HalfSpaceSystem, star: HalfSpaceSystem) -> float:
    """Sup-norm gap between the ruin-time survivals of the enlarged and the original target."""
    return float(np.max(np.abs(build_hazard(model, enlarged).survival - build_hazard(model, star).survival)))


def _overshoot_checks(paths: Sequence[PathRecord], model: IncrementModel, star: HalfSpaceSystem,
                      b: float):
    """Atom chi-square and radius PIT KS of X_T/b against Y*(T/b), path by path."""
    counts = np.zeros(model.spectral.size)
    expected = np.zeros(model.spectral.size)
    pit = []
    for record in paths:
        law = OvershootLaw.build(model, star, record.steps / b)
        jump = (record.last_increment - model.shift) / b
        k = int(np.argmax(model.spectral.directions @ jump))
        counts[k] += 1
        expected += law.weights
        radius = float(np.linalg.norm(jump))
        if np.isfinite(law.radii[k]) and radius > 0:
            pit.append(1.0 - min(law.radii[k] / radius, 1.0) ** model.alpha)

    support = expected > 0
    if support.sum() >= 2:
        chi2 = chisquare(counts[support], expected[support] * counts[support].sum() / expected[support].sum())
        chi2_stat, chi2_p = float(chi2.statistic), float(chi2.pvalue)
    else:
        chi2_stat, chi2_p = 0.0, 1.0
    radius_test = kstest(np.array(pit), "uniform")
    return chi2_stat, chi2_p, float(radius_test.statistic), float(radius_test.pvalue)


def _clt_statistics(paths: Sequence[PathRecord], model: IncrementModel, u: float = 0.5):
    """Per-component KS of (S_floor(uT) - floor(uT) eta)/sqrt(uT) against Normal(0, Var X_i)."""
    variances = np.diag(model.covariance())
    values = []
    for record in paths:
        k = int(math.floor(u * record.steps))
        values.append((record.states[k] - k * model.eta) / math.sqrt(u * record.steps))
    values = np.array(values)
    statistics, p_values = [], []
    for i in range(model.dim):
        if variances[i] <= 0:
            # degenerate coordinate: the centred walk must stay at 0
            exact = bool(np.allclose(values[:, i], 0.0, atol=1e-6))
            statistics.append(0.0 if exact else 1.0)
            p_values.append(1.0 if exact else 0.0)
            continue
        result = kstest(values[:, i], norm(scale=math.sqrt(variances[i])).cdf)
        statistics.append(float(result.statistic))
        p_values.append(float(result.pvalue))
    return statistics, p_values


def _lln_fraction(paths: Sequence[PathRecord], model: IncrementModel, tolerance: float) -> float:
    """Fraction of paths with sup_{u<1} ||S_floor(uT)/T - u eta|| above the tolerance."""
    misses = 0
    for record in paths:
        steps = record.steps
        pre_jump = record.states[:steps]
        n = np.arange(steps)[:, None]
        deviation = np.linalg.norm(pre_jump / steps - (n / steps) * model.eta, axis=1).max()
        misses += deviation > tolerance
    return misses / len(paths)


def limit_law_tests(paths: Sequence[PathRecord], kernel: ImportanceKernel, lln_tolerance: float = 0.5,
                    lln_max_fraction: float = 0.05) -> LimitLawReport:
    """Compare a conditioned, unweighted path sample with the asymptotic laws."""
    n = len(paths)
    if n < MIN_PATHS:
        raise InsufficientSample(f"limit-law tests need at least {MIN_PATHS} conditioned paths, got {n}")
    if n < 2 * MIN_PATHS:
        logger.warning(f"Only {n} conditioned paths; limit-law tests have little power")

    model, b = kernel.model, kernel.b
    star = kernel.star
    zstar = build_hazard(model, star)
    jump_time = build_hazard(model, kernel.system, kernel.params.a, kernel.params.theta)

    scaled_t = np.array([r.steps / b for r in paths])
    ks_zstar = kstest(scaled_t, zstar.cdf)
    ks_za = kstest(scaled_t, jump_time.cdf)
    p_values = {"T_zstar": float(ks_zstar.pvalue), "T_za_theta": float(ks_za.pvalue)}

    report = LimitLawReport(
        n_paths=n,
        b=b,
        ks_T_zstar=float(ks_zstar.statistic),
        ks_T_za_theta=float(ks_za.statistic),
        kappa_gap=kappa_gap(model, kernel.system, star),
    )

    jumped = [r for r in paths if r.n_jump is not None]
    if jumped:
        ks_n = kstest(np.array([r.n_jump / b for r in jumped]), jump_time.cdf)
        report.ks_N = float(ks_n.statistic)
        p_values["N_za_theta"] = float(ks_n.pvalue)
        report.coupling_fraction = float(np.mean([r.n_jump == r.steps for r in paths]))

    chi2_stat, chi2_p, ks_radius, radius_p = _overshoot_checks(paths, model, star, b)
    report.chi2_overshoot = chi2_stat
    report.ks_overshoot_radius = ks_radius
    p_values["overshoot_atoms"] = chi2_p
    p_values["overshoot_radius"] = radius_p

    passed = {name: p >= SIGNIFICANCE for name, p in p_values.items()}
    if all(r.states is not None for r in paths):
        if model.alpha > 2:
            report.ks_clt, clt_p = _clt_statistics(paths, model)
            for i, p in enumerate(clt_p):
                p_values[f"clt_{i}"] = p
                passed[f"clt_{i}"] = p >= SIGNIFICANCE
        else:
            report.lln_fraction = _lln_fraction(paths, model, lln_tolerance)
            passed["lln"] = report.lln_fraction <= lln_max_fraction
    else:
        logger.warning("Paths were simulated without states; path CLT/LLN checks skipped")

    report.p_values = p_values
    report.passed = passed
    logger.info(f"Limit laws at b={b}: KS(T/b, Z*)={report.ks_T_zstar:.4f} "
                f"KS(T/b, Z_a,theta)={report.ks_T_za_theta:.4f} passed={sum(passed.values())}/{len(passed)}")
    return report


def survival_rows(zstar: HazardTable, jump_time: HazardTable) -> List[dict]:
    """Plot-ready survival tables on the shared grid."""
    return [
        {
            "t": float(t),
            "survival_zstar": float(s1),
            "hazard_zstar": float(h1),
            "survival_za_theta": float(s2),
            "hazard_za_theta": float(h2),
        }
        for t, s1, h1, s2, h2 in zip(zstar.t, zstar.survival, zstar.hazard, jump_time.survival, jump_time.hazard)
    ]


# =====================
# SERVICE
# =====================

class LimitLawService:
    """Hazard tables for a kernel and the limit-law report on conditioned paths."""

    def tables(self, kernel: ImportanceKernel) -> Tuple[HazardTable, HazardTable]:
        """(Z*, Z_{a,theta}) survival tables on the shared grid."""
        zstar = build_hazard(kernel.model, kernel.star)
        jump_time = build_hazard(kernel.model, kernel.system, kernel.params.a, kernel.params.theta)
        return zstar, jump_time

    def report(self, paths: Sequence[PathRecord], kernel: ImportanceKernel,
               lln_tolerance: float = 0.5) -> LimitLawReport:
        return limit_law_tests(paths, kernel, lln_tolerance)

    def survival_table(self, kernel: ImportanceKernel) -> List[dict]:
        return survival_rows(*self.tables(kernel))


# Singleton instance
_limit_law_service = None

def get_limit_law_service() -> LimitLawService:
    global _limit_law_service
    if _limit_law_service is None:
        _limit_law_service = LimitLawService()
    return _limit_law_service
