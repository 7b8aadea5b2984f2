"""Run configuration: JSON ingestion, validation, defaults and the derived model objects."""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
import json
import logging

from pydantic import ValidationError as PydanticValidationError

from ..errors import DegenerateDirection, SchemaError, ValidationError
from ..models.schemas import KernelConfig, MollifierConfig, RunConfig, SimConfig, ValueStrategy
from .geometry_service import TargetSpec, check_feasible, enlarge, normalize_target
from .increments_service import IncrementModel, SpectralMeasure
from .kernel_service import ImportanceKernel, KernelParams
from .lyapunov_service import MollifierParams, proposition_constants

logger = logging.getLogger(__name__)


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise SchemaError(f"duplicate key {key!r}", key)
        seen[key] = value
    return seen


@dataclass(frozen=True)
class RunContext:
    """Validated configuration plus the model objects built from it."""
    config: RunConfig
    model: IncrementModel
    target: TargetSpec
    kernel_params: KernelParams
    mollifier: MollifierParams

    @property
    def seed(self) -> int:
        return self.config.sim.seed

    @property
    def workers(self) -> int:
        return self.config.sim.workers

    @property
    def n_paths(self) -> int:
        return self.config.sim.n_paths

    @property
    def b_values(self) -> List[float]:
        sim = self.config.sim
        if sim.b_list:
            return list(sim.b_list)
        return [sim.b] if sim.b is not None else []

    def require_b(self) -> float:
        if self.config.sim.b is None:
            if self.config.sim.b_list:
                return self.config.sim.b_list[0]
            raise ValidationError("sim.b is required for this subcommand", "sim.b")
        return self.config.sim.b

    def kernel(self, b: Optional[float] = None, theta: Optional[float] = None) -> ImportanceKernel:
        params = self.kernel_params
        if theta is not None:
            params = KernelParams(theta=theta, a=params.a, delta2=params.delta2,
                                  max_step_factor=params.max_step_factor)
        return ImportanceKernel.build(self.model, self.target, params, b or self.require_b(),
                                      self.config.kernel.value_strategy)


class ConfigService:
    """Turns JSON text into a RunContext; every failure is a SchemaError or ValidationError."""

    def load_raw(self, source: Union[str, Path, Dict[str, Any]]) -> Dict[str, Any]:
        if isinstance(source, dict):
            return source
        text = str(source)
        if not text.lstrip().startswith("{"):
            path = Path(text)
            if not path.is_file():
                raise SchemaError(f"config file {path} does not exist")
            text = path.read_text(encoding="utf-8")
        try:
            raw = json.loads(text, object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as e:
            raise SchemaError(f"invalid JSON: {e}")
        if not isinstance(raw, dict):
            raise SchemaError("config must be a JSON object")
        return raw

    def validate(self, raw: Dict[str, Any]) -> RunConfig:
        try:
            return RunConfig.model_validate(raw)
        except PydanticValidationError as e:
            first = e.errors()[0]
            field_path = ".".join(str(part) for part in first["loc"])
            raise SchemaError(first["msg"], field_path)

    def parse_config(self, source: Union[str, Path, Dict[str, Any]],
                     overrides: Optional[Dict[str, Any]] = None) -> RunContext:
        """Parse, apply CLI overrides to the sim section, validate, and fill derived defaults."""
        raw = self.load_raw(source)
        if overrides:
            raw = json.loads(json.dumps(raw))
            sim = raw.setdefault("sim", {})
            if not isinstance(sim, dict):
                raise SchemaError("sim must be an object", "sim")
            sim.update({k: v for k, v in overrides.items() if v is not None})
        return self.build_context(self.validate(raw))

    def build_context(self, config: RunConfig) -> RunContext:
        spectral = SpectralMeasure.from_atoms([a.dir for a in config.model.atoms],
                                              [a.weight for a in config.model.atoms])
        model = IncrementModel.build(config.model.alpha, config.model.xm, spectral, config.model.body_radius)
        try:
            target = normalize_target(config.target.vstar, config.target.astar, config.target.delta,
                                      config.target.beta, config.target.gamma)
        except DegenerateDirection as e:
            raise ValidationError(str(e), "negative-drift-direction")
        check_feasible(target, model)

        system = enlarge(target, model.dim)
        k = config.kernel
        params = KernelParams.for_system(system, theta=k.theta, a=k.a, delta2=k.delta2,
                                         max_step_factor=k.max_step_factor)
        if params.delta2 >= system.offs.min():
            raise ValidationError(f"kernel.delta2={params.delta2} must be below min_j a_j={system.offs.min()}",
                                  "delta2<min a_j")
        strategy = k.value_strategy or (ValueStrategy.EXACT_RADIAL if model.pure_radial
                                        else ValueStrategy.ASYMPTOTIC_KAPPA)

        m = config.mollifier
        theta_l, c1 = proposition_constants(m.epsilon)
        mollifier = MollifierParams(c0_tilde=m.c0_tilde, delta0=m.delta0, c1=m.c1 or c1)

        effective = config.model_copy(update={
            "target": config.target.model_copy(update={"beta": target.beta}),
            "kernel": k.model_copy(update={"delta2": params.delta2, "value_strategy": strategy}),
            "mollifier": m.model_copy(update={"c1": mollifier.c1, "theta": m.theta or theta_l}),
        })
        logger.debug(f"Effective config: {effective.model_dump_json()}")
        return RunContext(effective, model, target, params, mollifier)

    def defaults(self) -> Dict[str, Any]:
        """Documented defaults of every optional section."""
        theta_l, c1 = proposition_constants(0.2)
        return {
            "target": {"delta": 0.05, "beta": "10 * max(astar)", "gamma": 20.0},
            "kernel": {**KernelConfig().model_dump(mode="json"), "delta2": "0.1 * min_j a_j"},
            "mollifier": {**MollifierConfig().model_dump(mode="json"), "c1": c1, "theta": theta_l},
            "sim": SimConfig().model_dump(mode="json"),
        }


# Singleton instance
_config_service = None

def get_config_service() -> ConfigService:
    global _config_service
    if _config_service is None:
        _config_service = ConfigService()
    return _config_service


def parse_config(source: Union[str, Path, Dict[str, Any]], overrides: Optional[Dict[str, Any]] = None) -> RunContext:
    return get_config_service().parse_config(source, overrides)
