"""Certificate and comparison reports with deterministic JSON serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

HOLDS = "holds"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive"
NO_VIOLATION = "no_violation_found"
CONSISTENT = "consistent"
INCONSISTENT = "inconsistent"

PASSING = frozenset({HOLDS, NO_VIOLATION, CONSISTENT})


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy values and non-finite floats for JSON output."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2) + "\n"


@dataclass
class CertificateReport:
    """Outcome of one check.

    ``margin`` is the worst value of LHS - RHS over everything sampled, so the
    check is violated exactly when ``margin > tolerance``.
    """

    check: str
    verdict: str
    margin: float
    tolerance: float
    witness: dict = field(default_factory=dict)
    samples: int = 0
    tolerances: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict in PASSING

    @property
    def violated(self) -> bool:
        return self.verdict in (VIOLATED, INCONSISTENT)

    @property
    def witness_xi(self):
        return self.witness.get("xi")

    @property
    def witness_input(self):
        return self.witness.get("input")

    @property
    def witness_time(self):
        return self.witness.get("time")

    def to_dict(self) -> dict:
        tolerances = {"violation": self.tolerance, **self.tolerances}
        return {
            "check": self.check,
            "verdict": self.verdict,
            "margin": self.margin,
            "witness_xi": self.witness.get("xi"),
            "witness_input": self.witness.get("input"),
            "witness_time": self.witness.get("time"),
            "witness": {k: v for k, v in self.witness.items() if k not in ("xi", "input", "time")},
            "samples": self.samples,
            "tolerances": tolerances,
            "notes": list(self.notes),
            "details": self.details,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())


@dataclass
class ComparisonReport:
    """Agreement/diagnostic report between two routes or between probes."""

    check: str
    agree: bool | None
    verdicts: dict = field(default_factory=dict)
    diagnostic: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "agree": self.agree,
            "verdicts": self.verdicts,
            "diagnostic": self.diagnostic,
            "details": self.details,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())


def verdict_for(margin: float, tol: float, passing: str = HOLDS) -> str:
    return VIOLATED if not (margin <= tol) else passing
