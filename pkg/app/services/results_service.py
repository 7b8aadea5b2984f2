"""JSON and CSV persistence of run artifacts, plus the reader used to load them back."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence
import csv
import json
import logging
import math

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def format_float(value: float) -> Optional[str]:
    """Shortest round-trip spelling; non-finite values have no JSON spelling and become None."""
    if not math.isfinite(value):
        return None
    return repr(float(value))


def _plain(value: Any) -> Any:
    """json.dumps hook for the non-JSON types that appear in run payloads."""
    if isinstance(value, BaseModel):
        return value.model_dump(mode="python")
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _finite(value: Any) -> Any:
    """Replace inf and nan by None so the output stays strict JSON."""
    if isinstance(value, dict):
        return {str(k): _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, (BaseModel, Enum, np.ndarray, np.generic)):
        return _finite(_plain(value))
    return value


def dumps(payload: Any) -> str:
    return json.dumps(_finite(payload), default=_plain, indent=2, allow_nan=False) + "\n"


def _cell(value: Any) -> str:
    if isinstance(value, (Enum, np.ndarray, np.generic)):
        value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value) or ("nan" if math.isnan(value) else ("inf" if value > 0 else "-inf"))
    return str(value)


class ResultsService:
    """Writes UTF-8 JSON and RFC-4180 CSV files into an output directory."""

    def write_json(self, output_dir: Path, name: str, payload: Any) -> Path:
        path = Path(output_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(payload), encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path

    def write_csv(self, output_dir: Path, name: str, rows: Iterable[Dict[str, Any]],
                  fieldnames: Optional[Sequence[str]] = None) -> Path:
        rows = list(rows)
        path = Path(output_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\r\n")
            writer.writerow(fieldnames)
            for row in rows:
                writer.writerow([_cell(row.get(name)) for name in fieldnames])
        logger.info(f"Wrote {path} ({len(rows)} rows)")
        return path

    def read_json(self, path: Path) -> Any:
        return json.loads(Path(path).read_text(encoding="utf-8"))

    def read_csv(self, path: Path) -> List[Dict[str, str]]:
        with Path(path).open("r", encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))


# Singleton instance
_results_service = None

def get_results_service() -> ResultsService:
    global _results_service
    if _results_service is None:
        _results_service = ResultsService()
    return _results_service
