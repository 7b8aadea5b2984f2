from fastapi import APIRouter, HTTPException
from typing import Any, Dict

from ..errors import SchemaError, SimulationError, ValidationError
from ..services.config_service import get_config_service

router = APIRouter(prefix="/api/config", tags=["Config"])


def raise_http(error: SimulationError):
    """422 for configuration problems, 400 for everything a pipeline raised."""
    status = 422 if isinstance(error, (SchemaError, ValidationError)) else 400
    raise HTTPException(status_code=status, detail={"error": type(error).__name__, "message": str(error)})


@router.get("/defaults")
async def get_defaults():
    """Documented defaults of the optional config sections."""
    return get_config_service().defaults()


@router.post("/validate")
async def validate_config(raw: Dict[str, Any]):
    """Validate a run config and return it with every derived default filled in."""
    try:
        context = get_config_service().parse_config(raw)
    except SimulationError as e:
        raise_http(e)
    return {
        "valid": True,
        "effective_config": context.config.model_dump(mode="json"),
        "normalized_target": {
            "vstar": context.target.vstar.tolist(),
            "astar": context.target.astar.tolist(),
        },
        "shift": context.model.shift.tolist(),
    }
