"""Ruin-probability estimation from simulated paths.

Paths are simulated in fixed index chunks, each path on its own counter-based stream,
and chunk results are concatenated in index order before any reduction. The estimate
is therefore the same for any worker count.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
from scipy.stats import ks_2samp, norm

from ..errors import AbortOverflow, InfeasibleOracle
from ..models.schemas import HorizonGapRow, RuinEstimate, StopCause, TVRow
from ..utils.rng import CONDITIONAL_ORACLE, PATHS, PILOT, check_stream, path_stream
from .geometry_service import HalfSpaceSystem, r_eval
from .kernel_service import ImportanceKernel, KernelParams, PathRecord

logger = logging.getLogger(__name__)

CHUNK_SIZE = 2_000
OVERFLOW_ABORT = 1e-3
ORACLE_FLOOR = 1e-6
PILOT_PATHS = 20_000
Z99 = float(norm.ppf(0.995))

STOP_CODES = [StopCause.HIT_A, StopCause.HIT_GAMMA, StopCause.HORIZON_OVERFLOW]
FUNCTIONALS = ("T/b", "overshoot/b", "N_b/b")


@dataclass
class PathBatch:
    """Per-path summaries in path-index order."""
    index: np.ndarray
    stop: np.ndarray
    steps: np.ndarray
    n_jump: np.ndarray
    log_weight: np.ndarray
    hit_astar: np.ndarray
    overshoot: np.ndarray
    records: Optional[List[PathRecord]] = None

    def __len__(self) -> int:
        return len(self.index)

    @property
    def hit(self) -> np.ndarray:
        return self.stop == 0

    @property
    def weights(self) -> np.ndarray:
        """W = exp(log_weight) * I(HitA)."""
        return np.where(self.hit, np.exp(self.log_weight), 0.0)

    @property
    def overflow_frac(self) -> float:
        return float(np.mean(self.stop == 2)) if len(self) else 0.0

    @classmethod
    def from_records(cls, records: Sequence[PathRecord], star: HalfSpaceSystem, b: float,
                     keep_records: bool = False) -> "PathBatch":
        return cls(
            index=np.array([r.index for r in records], dtype=np.int64),
            stop=np.array([STOP_CODES.index(r.stop_cause) for r in records], dtype=np.int8),
            steps=np.array([r.steps for r in records], dtype=np.int64),
            n_jump=np.array([-1 if r.n_jump is None else r.n_jump for r in records], dtype=np.int64),
            log_weight=np.array([r.log_weight for r in records], dtype=float),
            hit_astar=np.array([r.hit_astar for r in records], dtype=bool),
            overshoot=np.array([r_eval(star, b, r.terminal) / b for r in records], dtype=float),
            records=list(records) if keep_records else None,
        )

    @classmethod
    def concat(cls, batches: Iterable["PathBatch"]) -> "PathBatch":
        batches = list(batches)
        keep = all(b.records is not None for b in batches)
        arrays = {
            name: np.concatenate([getattr(b, name) for b in batches])
            for name in ("index", "stop", "steps", "n_jump", "log_weight", "hit_astar", "overshoot")
        }
        records = [r for b in batches for r in b.records] if keep else None
        return cls(records=records, **arrays)


# =====================
# PATH SIMULATION
# =====================

def _run_chunk(kernel: ImportanceKernel, seed: int, purpose: int, nominal: bool, keep_records: bool,
               record_states: bool, accept_star_only: bool, bounds: Tuple[int, int]) -> PathBatch:
    """Simulate paths [start, stop); module level so worker processes can unpickle it."""
    start, stop = bounds
    records = []
    for index in range(start, stop):
        rng = path_stream(seed, index, purpose)
        if nominal:
            record = kernel.simulate_nominal_path(rng, record_states=record_states)
        else:
            record = kernel.simulate_path(rng, record_states=record_states)
        record.index = index
        records.append(record)
    batch = PathBatch.from_records(records, kernel.star, kernel.b, keep_records)
    if accept_star_only and batch.records is not None:
        batch.records = [r for r in batch.records if r.hit and r.hit_astar]
    return batch


def simulate_paths(kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1, *,
                   start: int = 0, purpose: int = PATHS, nominal: bool = False,
                   keep_records: bool = False, record_states: bool = False,
                   accept_star_only: bool = False) -> PathBatch:
    """Simulate paths start..start+n_paths-1; output order never depends on `workers`."""
    chunks = [(i, min(i + CHUNK_SIZE, start + n_paths)) for i in range(start, start + n_paths, CHUNK_SIZE)]
    task = partial(_run_chunk, kernel, seed, purpose, nominal, keep_records, record_states, accept_star_only)
    if workers <= 1 or len(chunks) <= 1:
        results = [task(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(task, chunks))
    logger.debug(f"Simulated {n_paths} paths in {len(chunks)} chunks (b={kernel.b}, workers={workers})")
    if not results:
        return PathBatch.concat([PathBatch.from_records([], kernel.star, kernel.b, keep_records)])
    return PathBatch.concat(results)


# =====================
# AGGREGATION
# =====================

def m2_ratio_std_error(weights: np.ndarray) -> float:
    """Delta-method standard error of mean(W^2)/mean(W)^2."""
    n = len(weights)
    m1 = weights.mean()
    if m1 <= 0 or n < 2:
        return math.inf
    m2 = np.mean(weights**2)
    influence = (weights**2 - m2) / m1**2 - 2.0 * m2 * (weights - m1) / m1**3
    return float(influence.std(ddof=1) / math.sqrt(n))


def summarize(batch: PathBatch, b: float, seed: int, runtime_s: float = 0.0) -> RuinEstimate:
    """Fold per-path weights (in index order) into the estimator and its diagnostics."""
    w = batch.weights
    n = len(w)
    p_hat = float(w.mean())
    var_hat = float(w.var(ddof=1))
    second = float(np.mean(w**2))
    if p_hat > 0:
        rel_err = math.sqrt(var_hat) / (p_hat * math.sqrt(n))
        m2_ratio = second / p_hat**2
    else:
        rel_err = math.inf
        m2_ratio = math.inf
    half_width = Z99 * math.sqrt(var_hat / n)
    return RuinEstimate(
        b=b,
        n_paths=n,
        p_hat=p_hat,
        p_hat_star=float(np.mean(w * batch.hit_astar)),
        var_hat=var_hat,
        rel_err=rel_err,
        m2_ratio=m2_ratio,
        tv_bound=math.sqrt(max(0.0, m2_ratio - 1.0)),
        overflow_frac=batch.overflow_frac,
        ess=effective_size(w),
        ci99=(max(0.0, p_hat - half_width), p_hat + half_width),
        runtime_s=runtime_s,
        seed=seed,
    )


def _check_overflow(batch: PathBatch) -> None:
    frac = batch.overflow_frac
    if frac > OVERFLOW_ABORT:
        raise AbortOverflow(f"{frac:.2e} of paths hit the horizon cap (limit {OVERFLOW_ABORT:.0e})")
    if frac > 0:
        logger.warning(f"{frac:.2e} of paths hit the horizon cap; counted as non-ruin")


def estimate_with_paths(kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1,
                        keep_records: bool = False, record_states: bool = False):
    """Importance-sampling estimate plus the per-path batch it was built from."""
    started = time.perf_counter()
    batch = simulate_paths(kernel, n_paths, seed, workers, keep_records=keep_records,
                           record_states=record_states)
    _check_overflow(batch)
    estimate = summarize(batch, kernel.b, seed, time.perf_counter() - started)
    logger.info(f"b={kernel.b}: p_hat={estimate.p_hat:.6e} rel_err={estimate.rel_err:.3e} "
                f"m2_ratio={estimate.m2_ratio:.4f}")
    return estimate, batch


def estimate_ruin(kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1) -> RuinEstimate:
    """Unbiased estimate of P_0(T_bA <= T_bGamma) under the mixture kernel."""
    return estimate_with_paths(kernel, n_paths, seed, workers)[0]


def crude_ruin_frequency(kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1,
                         keep_records: bool = False) -> Tuple[RuinEstimate, PathBatch]:
    """Crude Monte Carlo on the same streams as the importance sampler.

    W reduces to I(HitA), and the draws coincide with theta = 0 importance sampling,
    so both pipelines return the same estimate.
    """
    started = time.perf_counter()
    batch = simulate_paths(kernel, n_paths, seed, workers, nominal=True, keep_records=keep_records)
    _check_overflow(batch)
    return summarize(batch, kernel.b, seed, time.perf_counter() - started), batch


# =====================
# CRUDE CONDITIONAL ORACLE
# =====================

def crude_conditional_sample(kernel: ImportanceKernel, n_hits_wanted: int, seed: int, workers: int = 1,
                             record_states: bool = False, stop_on_star: bool = False,
                             pilot_paths: int = PILOT_PATHS) -> List[PathRecord]:
    """Nominal paths conditioned on hitting bA* before bGamma, by rejection.

    By default the walk stops on the enlarged set and accepts paths that entered it
    through bA*; with stop_on_star the walk stops on bA* itself.
    """
    if n_hits_wanted <= 0:
        return []
    walker = kernel.stopping_on_star() if stop_on_star else kernel

    pilot = simulate_paths(walker, pilot_paths, seed, workers, purpose=PILOT, nominal=True)
    freq = float(np.mean(pilot.hit & pilot.hit_astar))
    if freq < ORACLE_FLOOR:
        raise InfeasibleOracle(f"pilot hit frequency {freq:.2e} at b={kernel.b} is below {ORACLE_FLOOR:.0e}")
    logger.info(f"Crude oracle at b={kernel.b}: pilot frequency {freq:.3e}, want {n_hits_wanted} hits")

    accepted: List[PathRecord] = []
    next_index = 0
    while len(accepted) < n_hits_wanted:
        missing = n_hits_wanted - len(accepted)
        batch_size = max(CHUNK_SIZE, int(math.ceil(1.2 * missing / freq)))
        batch = simulate_paths(walker, batch_size, seed, workers, start=next_index,
                               purpose=CONDITIONAL_ORACLE, nominal=True, keep_records=True,
                               record_states=record_states, accept_star_only=True)
        accepted.extend(batch.records)
        next_index += batch_size
        logger.debug(f"Crude oracle: {len(accepted)} hits after {next_index} paths")
    return accepted[:n_hits_wanted]


# =====================
# DIAGNOSTICS
# =====================

def tv_diagnostic_curve(kernel: ImportanceKernel, b_list: Sequence[float], n_paths: int, seed: int,
                        workers: int = 1) -> List[TVRow]:
    """Second-moment ratio and total-variation bound of the estimator per scale b."""
    rows = []
    for b in b_list:
        estimate, batch = estimate_with_paths(kernel.with_scale(b), n_paths, seed, workers)
        rows.append(TVRow(
            b=float(b),
            n_paths=n_paths,
            p_hat=estimate.p_hat,
            rel_err=estimate.rel_err,
            m2_ratio=estimate.m2_ratio,
            m2_std_error=m2_ratio_std_error(batch.weights),
            tv_bound=estimate.tv_bound,
        ))
    return rows


def functional_values(records: Sequence[PathRecord], functional: str, b: float,
                      star: HalfSpaceSystem) -> np.ndarray:
    if functional == "T/b":
        return np.array([r.steps / b for r in records])
    if functional == "overshoot/b":
        return np.array([r_eval(star, b, r.terminal) / b for r in records])
    if functional == "N_b/b":
        if any(r.n_jump is None for r in records):
            raise ValueError("N_b/b needs paths on which the kernel jumped")
        return np.array([r.n_jump / b for r in records])
    raise ValueError(f"unknown functional {functional!r}, expected one of {FUNCTIONALS}")


def effective_size(weights: np.ndarray) -> float:
    """(sum W)^2 / sum W^2; zero for an empty or all-zero weight vector."""
    total_sq = float(np.sum(weights**2))
    return float(np.sum(weights)) ** 2 / total_sq if total_sq > 0 else 0.0


def resample_by_weight(records: Sequence[PathRecord], rng: np.random.Generator,
                       restrict_star: bool = True, size: Optional[int] = None) -> List[PathRecord]:
    """Multinomial resampling of weighted paths into an approximately unweighted sample.

    The default size is min(support, ESS): drawing more than ESS paths duplicates records
    and makes the downstream goodness-of-fit p-values too small.
    """
    weights = np.array([r.weight * (r.hit_astar or not restrict_star) for r in records])
    support = np.flatnonzero(weights > 0)
    if support.size == 0:
        return []
    w = weights[support]
    if np.all(w == w[0]):
        return [records[i] for i in support[:size]]
    if size is None:
        size = max(1, min(support.size, int(effective_size(w))))
    picks = rng.choice(support, size=size, replace=True, p=w / w.sum())
    return [records[i] for i in picks]


def conditional_law_distance(is_paths: Sequence[PathRecord], crude_paths: Sequence[PathRecord],
                             functional: str, b: float, star: HalfSpaceSystem,
                             rng: Optional[np.random.Generator] = None) -> Tuple[float, int]:
    """Two-sample KS statistic between resampled IS paths and crude conditional paths.

    Returns the statistic and the size of the resampled IS sample it was computed on.
    """
    rng = rng or check_stream(0)
    resampled = resample_by_weight(is_paths, rng)
    if not resampled or not crude_paths:
        raise ValueError("both samples must contain conditioned paths")
    left = functional_values(resampled, functional, b, star)
    right = functional_values(crude_paths, functional, b, star)
    return float(ks_2samp(left, right).statistic), len(resampled)


def finite_horizon_gap(kernel: ImportanceKernel, grid: Sequence[Tuple[float, float]], n_paths: int,
                       seed: int, workers: int = 1) -> List[HorizonGapRow]:
    """Crude frequencies of {T_bA* <= horizon} and {T_bA <= T_bGamma} over (gamma, delta) pairs."""
    rows = []
    for gamma, delta in grid:
        target = replace(kernel.target, gamma=float(gamma), delta=float(delta))
        params = KernelParams(theta=0.0, a=kernel.params.a, delta2=kernel.params.delta2,
                              max_step_factor=kernel.params.max_step_factor)
        walker = ImportanceKernel.build(kernel.model, target, params, kernel.b, kernel.cache.strategy)
        enlarged = simulate_paths(walker, n_paths, seed, workers, nominal=True)
        star = _star_without_gamma(walker, n_paths, seed)
        freq_enlarged = float(np.mean(enlarged.hit))
        freq_star = float(np.mean(star.hit))
        ratio = freq_star / freq_enlarged if freq_enlarged > 0 else math.nan
        logger.info(f"gamma={gamma} delta={delta}: star={freq_star:.4e} enlarged={freq_enlarged:.4e}")
        rows.append(HorizonGapRow(gamma=gamma, delta=delta, freq_star=freq_star,
                                  freq_enlarged=freq_enlarged, ratio=ratio))
    return rows


def _star_without_gamma(kernel: ImportanceKernel, n_paths: int, seed: int) -> PathBatch:
    walker = kernel.stopping_on_star()
    records = []
    for index in range(n_paths):
        record = walker.simulate_nominal_path(path_stream(seed, index, PATHS), stop_on_gamma=False)
        record.index = index
        records.append(record)
    return PathBatch.from_records(records, walker.star, walker.b)


# =====================
# SERVICE
# =====================

class EstimatorService:
    """Monte Carlo pipelines on an importance kernel; holds no state between calls."""

    oracle_functionals = ("T/b", "overshoot/b")

    def estimate(self, kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1,
                 keep_records: bool = False, record_states: bool = False) -> Tuple[RuinEstimate, PathBatch]:
        return estimate_with_paths(kernel, n_paths, seed, workers, keep_records, record_states)

    def crude(self, kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1) -> RuinEstimate:
        return crude_ruin_frequency(kernel, n_paths, seed, workers)[0]

    def recorded_paths(self, kernel: ImportanceKernel, n_paths: int, seed: int, workers: int = 1) -> PathBatch:
        return simulate_paths(kernel, n_paths, seed, workers, keep_records=True, record_states=True)

    def tv_curve(self, kernel: ImportanceKernel, b_list: Sequence[float], n_paths: int, seed: int,
                 workers: int = 1) -> List[TVRow]:
        return tv_diagnostic_curve(kernel, b_list, n_paths, seed, workers)

    def conditioned_paths(self, batch: PathBatch, seed: int) -> List[PathRecord]:
        """Resampled IS paths that entered bA*, sized by the effective sample size."""
        return resample_by_weight(batch.records, check_stream(seed, 1))

    def compare_with_crude(self, kernel: ImportanceKernel, batch: PathBatch, n_hits: int, seed: int,
                           workers: int = 1) -> Dict[str, Tuple[float, int, int]]:
        """KS statistic, IS sample size and crude sample size per oracle functional.

        The crude paths stop on bA* itself. Empty when no hits were requested.
        """
        hits = crude_conditional_sample(kernel, n_hits, seed, workers, stop_on_star=True)
        if not hits:
            return {}
        rng = check_stream(seed, 2)
        result = {}
        for functional in self.oracle_functionals:
            stat, n_is = conditional_law_distance(batch.records, hits, functional, kernel.b, kernel.star, rng)
            result[functional] = (stat, n_is, len(hits))
            logger.info(f"KS({functional}) = {stat:.4f} on {n_is} IS vs {len(hits)} crude paths")
        return result


# Singleton instance
_estimator_service = None

def get_estimator_service() -> EstimatorService:
    global _estimator_service
    if _estimator_service is None:
        _estimator_service = EstimatorService()
    return _estimator_service
