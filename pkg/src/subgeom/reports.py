"""Check reports and small CSV helpers."""

from __future__ import annotations

import csv
import io
import math
import numbers
from dataclasses import dataclass, field
from typing import Any

import numpy as np


@dataclass
class CheckReport:
    """Outcome of a numerical condition check.

    ``margin`` is the smallest slack ``bound - value`` seen over all checked
    points (negative when something failed); ``worst`` names where it occurred.
    ``constants`` holds whatever the check extracted (K, kappa, eta, C, ...).
    """

    name: str
    passed: bool
    margin: float = math.inf
    worst: Any = None
    constants: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def __bool__(self):
        return self.passed

    def summary(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "margin": _jsonable(self.margin),
            "worst": _jsonable(self.worst),
            "constants": {k: _brief(_jsonable(v)) for k, v in self.constants.items()},
            "n_violations": len(self.violations),
            "first_violation": _jsonable(self.violations[0]) if self.violations else None,
        }


def merge_reports(name: str, reports) -> CheckReport:
    """Combine sub-reports: passes iff all pass, margin is the minimum."""
    reports = list(reports)
    out = CheckReport(name=name, passed=all(r.passed for r in reports))
    for r in reports:
        if r.margin < out.margin:
            out.margin = r.margin
            out.worst = (r.name, r.worst)
        out.violations.extend((r.name, v) for v in r.violations)
        out.constants[r.name] = r.passed
    return out


def _jsonable(value):
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return repr(value)
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if hasattr(value, "item") and callable(value.item):
        return _jsonable(value.item())
    if hasattr(value, "tolist"):
        return _jsonable(value.tolist())
    return value


def _brief(value, limit: int = 16):
    if isinstance(value, list) and len(value) > limit:
        return f"<{len(value)} values>"
    return value


def fmt(value) -> str:
    """Deterministic text form of a number for CSV output."""
    if value is None:
        return ""
    if isinstance(value, (bool, str, np.bool_)):
        return str(value)
    if isinstance(value, numbers.Integral):
        return str(int(value))
    try:
        return repr(float(value))
    except (TypeError, ValueError):
        return str(value)


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()
