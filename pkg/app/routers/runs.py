from fastapi import APIRouter, HTTPException
from pathlib import Path
from typing import Any, Dict, Optional
import os

from ..errors import SimulationError
from ..models.schemas import Subcommand
from ..services.config_service import get_config_service
from ..services.run_service import get_run_service
from .config import raise_http

router = APIRouter(prefix="/api/runs", tags=["Runs"])


@router.get("/subcommands")
async def list_subcommands():
    """Pipelines that can be started through POST /api/runs/{subcommand}."""
    return [s.value for s in Subcommand]


@router.post("/{subcommand}")
def start_run(subcommand: str, raw: Dict[str, Any], seed: Optional[int] = None,
              paths: Optional[int] = None):
    """Run a pipeline synchronously and return its exit status, files and summary."""
    try:
        command = Subcommand(subcommand)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"Unknown subcommand {subcommand}")

    try:
        context = get_config_service().parse_config(raw, {"seed": seed, "n_paths": paths})
        output_dir = Path(os.getenv("RESULTS_DIR", "results")) / command.value
        outcome = get_run_service().run(command, context, output_dir)
    except SimulationError as e:
        raise_http(e)
    return {
        "subcommand": outcome.subcommand.value,
        "status": outcome.status,
        "files": outcome.files,
        "summary": outcome.summary,
    }
