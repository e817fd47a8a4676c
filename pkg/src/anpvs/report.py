"""Canonical JSON reports: sorted keys, floats at 6 significant digits."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import NumericalError

SIGNIFICANT = 6


def _canonical(value, path: str):
    if hasattr(value, "to_dict"):
        value = value.to_dict()
    if isinstance(value, dict):
        return {str(k): _canonical(v, f"{path}.{k}") for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_canonical(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            raise NumericalError(f"NaN in report at {path}", {"path": path})
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return float(f"{value:.{SIGNIFICANT}g}")
    return value


def canonical_json(report) -> str:
    """Serialise ``report`` (a dict or anything with ``to_dict``) canonically.

    Infinite floats (e.g. the FLOP ratio of a fully pruned net) are written as
    the strings ``"inf"``/``"-inf"`` so the output stays strict JSON.
    """
    data = _canonical(report, "$")
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(report, path) -> None:
    text = canonical_json(report)
    Path(path).write_text(text, encoding="utf-8")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
