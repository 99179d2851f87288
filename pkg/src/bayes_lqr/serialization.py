"""JSON formats for systems, datasets, sample sets, policies and reports.

Matrices are nested row-major lists. Infinite floats are written as the
string ``"inf"`` so files stay valid for strict JSON parsers.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .inference import SampleSet
from .model import Dataset, GainPolicy, LinearSystem, Rollout


def encode_float(v: float):
    if isinstance(v, (float, np.floating)) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (float, np.floating)) and math.isnan(v):
        return "nan"
    return float(v)


def decode_float(v) -> float:
    return float(v)  # float("inf") and float("nan") parse the string forms


def system_to_dict(s: LinearSystem) -> Dict[str, Any]:
    return {"A": s.A.tolist(), "B": s.B.tolist(), "Pi": s.Pi.tolist()}


def system_from_dict(d) -> LinearSystem:
    return LinearSystem(np.array(d["A"], dtype=float), np.array(d["B"], dtype=float),
                        np.array(d["Pi"], dtype=float))


def dataset_to_dict(data: Dataset) -> Dict[str, Any]:
    return {"n_x": data.n_x, "n_u": data.n_u,
            "rollouts": [{"x": r.x.tolist(), "u": r.u.tolist()} for r in data.rollouts]}


def dataset_from_dict(d) -> Dataset:
    n_x, n_u = int(d["n_x"]), int(d["n_u"])
    rollouts = []
    for r in d["rollouts"]:
        x = np.array(r["x"], dtype=float).reshape(-1, n_x)
        u = np.array(r["u"], dtype=float).reshape(-1, n_u)
        rollouts.append(Rollout(x, u))
    return Dataset(tuple(rollouts), n_x, n_u)


def sampleset_to_dict(ss: SampleSet) -> Dict[str, Any]:
    return {
        "confidence": ss.confidence,
        "log_weights": [encode_float(w) for w in ss.log_weights],
        "cutoff": encode_float(ss.cutoff),
        "pool_size": ss.pool_size,
        "weight_discards": ss.weight_discards,
        "unstabilizable_discards": ss.unstabilizable_discards,
        "samples": [system_to_dict(s) for s in ss.samples],
    }


def sampleset_from_dict(d) -> SampleSet:
    return SampleSet([system_from_dict(s) for s in d["samples"]], float(d["confidence"]),
                     np.array([decode_float(w) for w in d["log_weights"]]),
                     decode_float(d.get("cutoff", "-inf")), int(d.get("pool_size", 0)),
                     int(d.get("weight_discards", 0)), int(d.get("unstabilizable_discards", 0)))


def policy_to_dict(K: Optional[GainPolicy], Q, R, method: str, cost_trace=(), status: str = "",
                   iterations: int = 0, extra: Optional[dict] = None) -> Dict[str, Any]:
    d = {
        "K": None if K is None else K.K.tolist(),
        "Q": np.asarray(Q).tolist(),
        "R": np.asarray(R).tolist(),
        "method": method,
        "cost_trace": [encode_float(c) for c in cost_trace],
        "status": status,
        "iterations": iterations,
    }
    if extra:
        d.update(extra)
    return d


def policy_from_dict(d):
    K = None if d.get("K") is None else GainPolicy(np.array(d["K"], dtype=float))
    return K, np.array(d["Q"], dtype=float), np.array(d["R"], dtype=float)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
