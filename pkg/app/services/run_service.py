"""Subcommand dispatch: runs one pipeline on a RunContext and writes its artifacts."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging
import math

from ..errors import ValidationError
from ..models.schemas import Subcommand
from .config_service import RunContext
from .estimator_service import STOP_CODES, get_estimator_service
from .limits_service import get_limit_law_service
from .lyapunov_service import get_lyapunov_service
from .results_service import get_results_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TEST_FAILED = 2

KS_CRITICAL_1PCT = 1.628


@dataclass
class RunOutcome:
    subcommand: Subcommand
    status: int
    files: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def ks_two_sample_critical(n: int, m: int, coefficient: float = KS_CRITICAL_1PCT) -> float:
    """Asymptotic two-sample KS critical value."""
    return coefficient * math.sqrt((n + m) / (n * m))


class RunService:
    """One method per subcommand; each returns the exit status and the files it wrote."""

    def __init__(self):
        self.results = get_results_service()
        self.estimator = get_estimator_service()
        self.lyapunov = get_lyapunov_service()
        self.limits = get_limit_law_service()

    def run(self, subcommand: Subcommand, context: RunContext, output_dir: Optional[Path] = None) -> RunOutcome:
        subcommand = Subcommand(subcommand)
        output_dir = Path(output_dir or context.config.sim.output_dir)
        logger.info("=" * 60)
        logger.info(f"Running {subcommand.value} (seed={context.seed}, workers={context.workers})")
        logger.info("=" * 60)

        handlers = {
            Subcommand.ESTIMATE: self._estimate,
            Subcommand.TV_CURVE: self._tv_curve,
            Subcommand.VERIFY_LYAPUNOV: self._verify_lyapunov,
            Subcommand.LIMIT_LAWS: self._limit_laws,
            Subcommand.CRUDE_ORACLE: self._crude_oracle,
            Subcommand.SIMULATE_PATHS: self._simulate_paths,
        }
        outcome = RunOutcome(subcommand, EXIT_OK)
        outcome.files.append(str(self.results.write_json(
            output_dir, "effective_config.json", context.config.model_dump(mode="python"))))
        handlers[subcommand](context, output_dir, outcome)
        logger.info(f"{subcommand.value} finished with status {outcome.status}")
        return outcome

    def _estimate(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        kernel = context.kernel()
        record = context.config.sim.record_paths
        estimate, batch = self.estimator.estimate(kernel, context.n_paths, context.seed, context.workers)
        outcome.files.append(str(self.results.write_json(output_dir, "estimate.json", estimate)))
        if record:
            rows = [
                {"index": int(i), "W": float(w), "T": int(t), "stop_cause": STOP_CODES[c].value,
                 "n_jump": None if n < 0 else int(n), "hit_astar": bool(h)}
                for i, w, t, c, n, h in zip(batch.index, batch.weights, batch.steps, batch.stop,
                                            batch.n_jump, batch.hit_astar)
            ]
            outcome.files.append(str(self.results.write_csv(output_dir, "paths.csv", rows)))
        outcome.summary = estimate.model_dump(mode="json")

    def _tv_curve(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        b_list = context.b_values
        if not b_list:
            raise ValidationError("sim.b_list (or sim.b) is required for tv-curve", "sim.b_list")
        rows = self.estimator.tv_curve(context.kernel(b_list[0]), b_list, context.n_paths, context.seed,
                                       context.workers)
        payload = [row.model_dump(mode="python") for row in rows]
        outcome.files.append(str(self.results.write_csv(output_dir, "tv_curve.csv", payload)))
        outcome.files.append(str(self.results.write_json(output_dir, "tv_curve.json", payload)))
        outcome.summary = {"rows": [row.model_dump(mode="json") for row in rows]}

    def _verify_lyapunov(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        sim = context.config.sim
        b = context.require_b()
        kernel = context.kernel(b, theta=context.config.mollifier.theta)
        lyap = self.lyapunov.function(kernel, context.mollifier)
        states = self.lyapunov.states(kernel, sim.grid_states, sim.n_grid)
        rows = self.lyapunov.check_states(kernel, lyap, states, sim.n_mc, context.seed, context.workers)

        dim = context.model.dim
        table = [
            {**{f"s{i}": row.state[i] for i in range(dim)}, "J1": row.J1, "J2": row.J2_scaled,
             "sum": row.total, "std_error": row.std_error, "pass": row.passed}
            for row in rows
        ]
        outcome.files.append(str(self.results.write_csv(output_dir, "lyapunov.csv", table)))
        failed = sum(not row.passed for row in rows)
        outcome.summary = {"b": b, "states": len(rows), "failed": failed,
                           "saturation_level": self.lyapunov.saturation(lyap, context.seed),
                           "c0": lyap.c0, "c1": context.mollifier.c1, "theta": kernel.params.theta}
        outcome.files.append(str(self.results.write_json(output_dir, "lyapunov.json", outcome.summary)))
        if failed:
            outcome.status = EXIT_TEST_FAILED

    def _limit_laws(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        kernel = context.kernel()
        _, batch = self.estimator.estimate(kernel, context.n_paths, context.seed, context.workers,
                                           keep_records=True, record_states=True)
        conditioned = self.estimator.conditioned_paths(batch, context.seed)
        report = self.limits.report(conditioned, kernel, context.config.sim.lln_tolerance)
        payload = report.model_dump(mode="python")
        payload["all_passed"] = report.all_passed
        outcome.files.append(str(self.results.write_json(output_dir, "limit_laws.json", payload)))
        outcome.files.append(str(self.results.write_csv(output_dir, "survival_tables.csv",
                                                        self.limits.survival_table(kernel))))
        outcome.summary = report.model_dump(mode="json")
        if not report.all_passed:
            outcome.status = EXIT_TEST_FAILED

    def _crude_oracle(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        sim = context.config.sim
        kernel = context.kernel()
        crude = self.estimator.crude(kernel, context.n_paths, context.seed, context.workers)
        importance, batch = self.estimator.estimate(kernel, context.n_paths, context.seed, context.workers,
                                                    keep_records=True)
        lo = max(crude.ci99[0], importance.ci99[0])
        hi = min(crude.ci99[1], importance.ci99[1])
        passed = {"ci99_overlap": lo <= hi}
        payload: Dict[str, Any] = {"crude": crude, "importance": importance, "n_hits": sim.n_hits}

        comparison = self.estimator.compare_with_crude(kernel, batch, sim.n_hits, context.seed, context.workers)
        if comparison:
            distances, critical = {}, {}
            for functional, (stat, n_is, n_crude) in comparison.items():
                distances[functional] = stat
                critical[functional] = ks_two_sample_critical(n_is, n_crude)
                passed[f"ks {functional}"] = stat <= critical[functional]
            payload["ks"] = distances
            payload["ks_critical_1pct"] = critical
        payload["passed"] = passed
        outcome.files.append(str(self.results.write_json(output_dir, "crude.json", payload)))
        outcome.summary = {"p_crude": crude.p_hat, "p_importance": importance.p_hat, "passed": passed}
        if not all(passed.values()):
            outcome.status = EXIT_TEST_FAILED

    def _simulate_paths(self, context: RunContext, output_dir: Path, outcome: RunOutcome):
        batch = self.estimator.recorded_paths(context.kernel(), context.n_paths, context.seed, context.workers)
        dim = context.model.dim
        steps = []
        for record in batch.records:
            for n, state in enumerate(record.states):
                steps.append({
                    "path": record.index,
                    "step": n,
                    **{f"s{i}": float(state[i]) for i in range(dim)},
                    "jumped": bool(record.jumped[n - 1]) if n else False,
                    "log_khat": float(record.log_khat[n - 1]) if n else 0.0,
                    "stop_cause": record.stop_cause.value if n == record.steps else "",
                })
        outcome.files.append(str(self.results.write_csv(output_dir, "steps.csv", steps)))
        outcome.summary = {"paths": len(batch), "steps": len(steps), "hits": int(batch.hit.sum())}


# Singleton instance
_run_service = None

def get_run_service() -> RunService:
    global _run_service
    if _run_service is None:
        _run_service = RunService()
    return _run_service
