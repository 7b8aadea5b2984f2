from pydantic import BaseModel, Field
from typing import Optional, List, Dict, Tuple
from enum import Enum


class Subcommand(str, Enum):
    ESTIMATE = "estimate"
    TV_CURVE = "tv-curve"
    VERIFY_LYAPUNOV = "verify-lyapunov"
    LIMIT_LAWS = "limit-laws"
    CRUDE_ORACLE = "crude-oracle"
    SIMULATE_PATHS = "simulate-paths"


class StopCause(str, Enum):
    HIT_A = "HitA"
    HIT_GAMMA = "HitGamma"
    HORIZON_OVERFLOW = "HorizonOverflow"


class ValueStrategy(str, Enum):
    EXACT_RADIAL = "ExactRadial"
    ASYMPTOTIC_KAPPA = "AsymptoticKappa"


# =====================
# RUN CONFIGURATION
# =====================

class AtomConfig(BaseModel):
    dir: List[float] = Field(min_length=1)
    weight: float = Field(gt=0)

    class Config:
        extra = "forbid"


class ModelConfig(BaseModel):
    alpha: float = Field(gt=1)
    xm: float = Field(default=1.0, gt=0)
    body_radius: float = Field(default=0.0, ge=0)
    atoms: List[AtomConfig] = Field(min_length=1)

    class Config:
        extra = "forbid"


class TargetConfig(BaseModel):
    vstar: List[List[float]] = Field(min_length=1)
    astar: List[float] = Field(min_length=1)
    delta: float = Field(default=0.05, gt=0, lt=1)
    beta: Optional[float] = Field(default=None, gt=0)  # None -> 10 * max(astar)
    gamma: float = Field(default=20.0, gt=0)

    class Config:
        extra = "forbid"


class KernelConfig(BaseModel):
    theta: float = Field(default=0.99, ge=0, lt=1)  # 0 switches the change of measure off
    a: float = Field(default=0.99, gt=0, lt=1)
    delta2: Optional[float] = Field(default=None, gt=0)  # None -> 0.1 * min a_j
    max_step_factor: float = Field(default=10.0, gt=0)
    value_strategy: Optional[ValueStrategy] = None  # None -> exact when body_radius == 0

    class Config:
        extra = "forbid"


class MollifierConfig(BaseModel):
    c0_tilde: float = Field(default=1.0, gt=0)
    delta0: float = Field(default=1.0, gt=0)
    epsilon: float = Field(default=0.2, gt=0, lt=0.5)
    c1: Optional[float] = Field(default=None, gt=1)  # None -> (1+eps)^3 (1+4 eps)
    theta: Optional[float] = Field(default=None, gt=0, lt=1)  # None -> 1/(1+eps)^2

    class Config:
        extra = "forbid"


class SimConfig(BaseModel):
    b: Optional[float] = Field(default=None, gt=0)
    b_list: Optional[List[float]] = None
    n_paths: int = Field(default=10_000, ge=2)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    workers: int = Field(default=1, ge=1)
    output_dir: str = "results"
    record_paths: bool = False
    n_mc: int = Field(default=10_000, ge=1_000)
    n_hits: int = Field(default=1_000, ge=0)
    n_grid: int = Field(default=20, ge=1)
    grid_states: Optional[List[List[float]]] = None  # in units of b
    lln_tolerance: float = Field(default=0.5, gt=0)

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    model: ModelConfig
    target: TargetConfig
    kernel: KernelConfig = Field(default_factory=KernelConfig)
    mollifier: MollifierConfig = Field(default_factory=MollifierConfig)
    sim: SimConfig = Field(default_factory=SimConfig)

    class Config:
        extra = "forbid"


# =====================
# REPORTS
# =====================

class RuinEstimate(BaseModel):
    b: float
    n_paths: int
    p_hat: float
    p_hat_star: float
    var_hat: float
    rel_err: float
    m2_ratio: float
    tv_bound: float
    overflow_frac: float
    ess: float
    ci99: Tuple[float, float]
    runtime_s: float = 0.0
    seed: int = 0


class TVRow(BaseModel):
    b: float
    n_paths: int
    p_hat: float
    rel_err: float
    m2_ratio: float
    m2_std_error: float
    tv_bound: float


class DriftRow(BaseModel):
    state: List[float]
    J1: float
    J2_scaled: float
    total: float
    std_error: float
    passed: bool


class HorizonGapRow(BaseModel):
    gamma: float
    delta: float
    freq_star: float
    freq_enlarged: float
    ratio: float


class LimitLawReport(BaseModel):
    n_paths: int
    b: float
    ks_T_zstar: float
    ks_T_za_theta: float
    ks_N: Optional[float] = None
    ks_clt: List[float] = Field(default_factory=list)
    lln_fraction: Optional[float] = None
    chi2_overshoot: Optional[float] = None
    ks_overshoot_radius: Optional[float] = None
    coupling_fraction: Optional[float] = None
    kappa_gap: Optional[float] = None
    p_values: Dict[str, float] = Field(default_factory=dict)
    passed: Dict[str, bool] = Field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())
