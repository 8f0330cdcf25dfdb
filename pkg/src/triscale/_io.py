"""Deterministic CSV and JSON writers (17 significant digits, LF line endings)."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.17g}"


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows) -> None:
    Path(path).write_bytes(csv_text(header, rows).encode("utf-8"))


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if not math.isfinite(value):
            return None
        # round-trip through the 17-digit text form so JSON and CSV agree
        return float(fmt(value))
    return obj


def json_text(payload) -> str:
    return json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_json(path, payload) -> None:
    Path(path).write_bytes(json_text(payload).encode("utf-8"))
