"""Approximating transition kernel and the path sampler under it.

With probability p_b(s) the next increment is drawn conditionally on landing in the
jump region A_{b,a}(s); otherwise it is a nominal increment. k_hat is the one-step
density of the nominal kernel against this mixture, so the product of k_hat along a
stopped path is an unbiased importance weight.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional
import logging
import math

import numpy as np

from ..errors import InconsistentTransition, ValidationError
from ..models.schemas import StopCause, ValueStrategy
from ..utils.envelope import pareto_partial_mean, upper_envelope
from .geometry_service import (
    EnlargedSystem, HalfSpaceSystem, JumpRegion, TargetSpec, enlarge, gamma_exit, jump_region, r_eval,
)
from .increments_service import TAIL_PROB_TOL, IncrementModel, ball_cubature_nodes, kappa_tail_integral

logger = logging.getLogger(__name__)

# P(X in region) inside walks only sets the mixture probability p
MIXTURE_PROB_TOL = 1e-3


@dataclass(frozen=True)
class KernelParams:
    theta: float = 0.99
    a: float = 0.99
    delta2: float = 0.1
    max_step_factor: float = 10.0

    def __post_init__(self):
        if not 0 <= self.theta < 1:
            raise ValidationError(f"theta must lie in [0, 1), got {self.theta}", "theta")
        if not 0 < self.a < 1:
            raise ValidationError(f"contraction a must lie in (0, 1), got {self.a}", "a")
        if self.delta2 <= 0:
            raise ValidationError(f"delta2 must be positive, got {self.delta2}", "delta2>0")
        if self.max_step_factor <= 0:
            raise ValidationError("max_step_factor must be positive", "max_step_factor>0")

    @classmethod
    def for_system(cls, system: HalfSpaceSystem, **overrides) -> "KernelParams":
        """Defaults with delta2 = 0.1 * min_j a_j."""
        values = {"delta2": 0.1 * float(system.offs.min())}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class ValueCache:
    """Per-atom coefficients of the value function, computed once per kernel."""
    strategy: ValueStrategy
    projections: np.ndarray
    shift_proj: np.ndarray

    @classmethod
    def build(cls, model: IncrementModel, system: HalfSpaceSystem,
              strategy: Optional[ValueStrategy] = None) -> "ValueCache":
        if strategy is None:
            strategy = ValueStrategy.EXACT_RADIAL if model.pure_radial else ValueStrategy.ASYMPTOTIC_KAPPA
        strategy = ValueStrategy(strategy)
        if strategy == ValueStrategy.EXACT_RADIAL and not model.pure_radial:
            raise ValidationError("exact value function needs body_radius = 0", "ExactRadial")
        return cls(strategy, model.projections(system.vs), system.vs @ model.shift)


@dataclass
class PathRecord:
    stop_cause: StopCause
    steps: int
    n_jump: Optional[int]
    log_weight: float
    hit_astar: bool
    terminal: np.ndarray
    last_increment: np.ndarray
    states: Optional[np.ndarray] = None
    jumped: Optional[np.ndarray] = None
    log_khat: Optional[np.ndarray] = None
    index: int = -1

    @property
    def hit(self) -> bool:
        return self.stop_cause == StopCause.HIT_A

    @property
    def weight(self) -> float:
        """W = exp(log_weight) * I(HitA)."""
        return math.exp(self.log_weight) if self.hit else 0.0


@dataclass(frozen=True)
class StepContext:
    """Everything step and k_hat need at one state, computed once."""
    p: float
    region: Optional[JumpRegion] = None
    region_prob: float = 0.0
    value: float = 0.0


@dataclass(frozen=True)
class ImportanceKernel:
    """The kernel at one scale b; immutable and picklable for worker processes."""
    model: IncrementModel
    target: TargetSpec
    system: EnlargedSystem
    params: KernelParams
    b: float
    cache: ValueCache
    star: HalfSpaceSystem = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "star", self.target.star_system())

    @classmethod
    def build(cls, model: IncrementModel, target: TargetSpec, params: KernelParams, b: float,
              strategy: Optional[ValueStrategy] = None) -> "ImportanceKernel":
        system = enlarge(target, model.dim)
        if params.delta2 >= system.offs.min():
            raise ValidationError(
                f"delta2={params.delta2} must be below min_j a_j={system.offs.min()}", "delta2<min a_j"
            )
        return cls(model, target, system, params, float(b), ValueCache.build(model, system, strategy))

    def with_scale(self, b: float) -> "ImportanceKernel":
        return ImportanceKernel(self.model, self.target, self.system, self.params, float(b), self.cache)

    def with_params(self, params: KernelParams) -> "ImportanceKernel":
        return ImportanceKernel(self.model, self.target, self.system, params, self.b, self.cache)

    def stopping_on_star(self) -> "ImportanceKernel":
        """Same walk, but ruin means entering bA* instead of the enlarged bA."""
        star = EnlargedSystem(self.target.vstar, self.target.astar, m=self.target.m)
        return ImportanceKernel(self.model, self.target, star, self.params, self.b,
                                ValueCache.build(self.model, star, self.cache.strategy))

    @property
    def horizon(self) -> int:
        return math.ceil(self.params.max_step_factor * self.target.gamma * self.b)

    # =====================
    # VALUE FUNCTION
    # =====================

    def v_b(self, s) -> float:
        """v_b(s) = E(r_b(s+X)^+)."""
        if self.cache.strategy == ValueStrategy.EXACT_RADIAL:
            return self.v_b_exact(s)
        return self.v_b_asymptotic(s)

    def v_b_exact(self, s) -> float:
        """Closed form for the pure-radial model: r_b(s+c+r theta_k)^+ is piecewise linear in r."""
        s = np.asarray(s, dtype=float)
        base = self.system.vs @ s + self.cache.shift_proj - self.system.offs * self.b
        model = self.model
        total = 0.0
        for k, slopes in enumerate(self.cache.projections):
            env = upper_envelope(np.append(base, 0.0), np.append(slopes, 0.0), model.xm)
            pieces = pareto_partial_mean(env.piece_intercepts, env.piece_slopes, env.lo, env.hi,
                                         model.alpha, model.xm)
            total += model.spectral.weights[k] * float(pieces.sum())
        return total

    def v_b_reference(self, s) -> float:
        """Exact radial integral averaged over the ball cubature; works with body noise."""
        if self.model.pure_radial:
            return self.v_b_exact(s)
        s = np.asarray(s, dtype=float)
        nodes = self.model.body_radius * ball_cubature_nodes(self.model.dim)
        return float(np.mean([self.v_b_exact(s + u) for u in nodes]))

    def v_b_asymptotic(self, s) -> float:
        """b P(||X||>b) * integral of kappa_a(t, s/b) over t >= 0."""
        z = np.asarray(s, dtype=float) / self.b
        integral = kappa_tail_integral(self.model, self.system.vs, self.system.offs, 0.0, z=z)
        return self.b * self.model.tail_norm(self.b) * integral

    # =====================
    # MIXTURE AND WEIGHTS
    # =====================

    def context(self, s, tol: float = TAIL_PROB_TOL) -> StepContext:
        s = np.asarray(s, dtype=float)
        if self.params.theta == 0 or r_eval(self.system, self.b, s) > -self.params.delta2 * self.b:
            return StepContext(p=0.0)
        region = jump_region(self.system, self.b, self.params.a, s)
        prob = self.model.tail_union_prob(region.directions, region.thresholds, tol=tol)
        if prob <= 0:
            return StepContext(p=0.0, region=region)
        value = self.v_b(s)
        p = 1.0 if value <= 0 else min(self.params.theta * prob / value, 1.0)
        return StepContext(p=p, region=region, region_prob=prob, value=value)

    def p_b(self, s) -> float:
        """min(theta P(s+X in A_{b,a}(s)) / v_b(s), 1) I(r_b(s) <= -delta2 b)."""
        return self.context(s).p

    def log_khat_from(self, ctx: StepContext, x, region_prob: Optional[float] = None) -> float:
        """log k_hat of increment x; region_prob overrides the context's P(X in region)."""
        if ctx.p == 0:
            return 0.0
        prob = ctx.region_prob if region_prob is None else region_prob
        if prob <= 0:
            return 0.0
        if ctx.region.contains(x):
            return math.log(prob) - math.log(ctx.p + (1.0 - ctx.p) * prob)
        if ctx.p >= 1:
            raise InconsistentTransition("p_b = 1 but the transition left the jump region")
        return -math.log1p(-ctx.p)

    def khat(self, s0, s1) -> float:
        """Nominal-to-mixture density ratio of the transition s0 -> s1 (marginal in the increment)."""
        s0 = np.asarray(s0, dtype=float)
        return math.exp(self.log_khat_from(self.context(s0), np.asarray(s1, dtype=float) - s0))

    def step(self, s0, rng: np.random.Generator):
        """One transition under the mixture; returns (s1, jumped, log k_hat).

        With body noise the weight is the ratio for the joint (radial part, noise) draw:
        the noise keeps its nominal law and only the radial part is conditioned, so the
        region probability given the drawn noise is exact.
        """
        s0 = np.asarray(s0, dtype=float)
        if self.model.pure_radial:
            ctx = self.context(s0)
            jumped = ctx.p > 0 and rng.random() < ctx.p
            if jumped:
                x = self.model.sample_conditional_jump(s0, ctx.region, rng)
            else:
                x = self.model.sample(rng)
            return s0 + x, jumped, self.log_khat_from(ctx, x)

        ctx = self.context(s0, tol=MIXTURE_PROB_TOL)
        jumped = ctx.p > 0 and rng.random() < ctx.p
        if jumped:
            x, _, prob = self.model.sample_jump_given_noise(ctx.region, rng)
        else:
            x, noise = self.model.sample_with_noise(rng)
            prob = None
            if ctx.p > 0:
                prob = self.model.noise_region_prob(ctx.region.directions, ctx.region.thresholds, noise)
        return s0 + x, jumped, self.log_khat_from(ctx, x, region_prob=prob)

    # =====================
    # PATHS
    # =====================

    def _walk(self, rng: np.random.Generator, advance: Callable, record_states: bool,
              stop_on_gamma: bool = True) -> PathRecord:
        s = np.zeros(self.model.dim)
        previous = s
        states: List[np.ndarray] = [s]
        flags: List[bool] = []
        increments: List[float] = []
        n, n_jump, log_weight = 0, None, 0.0
        horizon = self.horizon
        while True:
            if r_eval(self.system, self.b, s) > 0:
                cause = StopCause.HIT_A
                break
            if stop_on_gamma and gamma_exit(self.target, self.b, s):
                cause = StopCause.HIT_GAMMA
                break
            if n > horizon:
                cause = StopCause.HORIZON_OVERFLOW
                break
            previous = s
            s, jumped, log_k = advance(s, rng)
            n += 1
            if jumped and n_jump is None:
                n_jump = n
            log_weight += log_k
            if record_states:
                states.append(s)
                flags.append(jumped)
                increments.append(log_k)

        return PathRecord(
            stop_cause=cause,
            steps=n,
            n_jump=n_jump,
            log_weight=log_weight,
            hit_astar=bool(r_eval(self.star, self.b, s) > 0),
            terminal=s,
            last_increment=s - previous,
            states=np.array(states) if record_states else None,
            jumped=np.array(flags, dtype=bool) if record_states else None,
            log_khat=np.array(increments) if record_states else None,
        )

    def simulate_path(self, rng: np.random.Generator, record_states: bool = False) -> PathRecord:
        """Path from S_0 = 0 under the mixture kernel, stopped at T_bA, T_bGamma or the horizon."""
        return self._walk(rng, self.step, record_states)

    def simulate_nominal_path(self, rng: np.random.Generator, record_states: bool = False,
                              stop_on_gamma: bool = True) -> PathRecord:
        """Crude walk with the same stopping rule; draws exactly what theta = 0 would draw.

        With stop_on_gamma=False only ruin and the horizon stop the walk.
        """
        def nominal(s, generator):
            return s + self.model.sample(generator), False, 0.0
        return self._walk(rng, nominal, record_states, stop_on_gamma)
