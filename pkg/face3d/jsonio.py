"""
JSON / CSV serialization helpers shared by every output writer
face3d/jsonio.py
"""

import json
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .errors import IoError, ParseError

# 17 significant digits round-trips any double exactly
CSV_FLOAT_FORMAT = "%.17g"


class NumpyJSONEncoder(json.JSONEncoder):
    """Custom JSON encoder to handle numpy types and enums"""

    def default(self, obj):
        if isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, Path):
            return obj.as_posix()
        return super().default(obj)


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, cls=NumpyJSONEncoder, sort_keys=True, indent=2) + "\n"


def dump_json(obj: Any, path) -> Path:
    """Write obj as deterministic JSON (sorted keys, fixed indent)"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_json(obj), encoding="utf-8")
    except OSError as e:
        raise IoError(f"Cannot write JSON file: {e}", {"path": str(path)}) from e
    return path


def load_json(path) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoError(f"Cannot read JSON file: {e}", {"path": str(path)}) from e
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON: {e.msg}", path, e.lineno) from e
