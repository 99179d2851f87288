"""Seeded benchmark harness: simulate, infer, synthesize and evaluate over a grid.

Every (trial, N) cell gets its own random streams derived from the master
seed, so any cell can be re-run in isolation. All methods inside a cell see
the same dataset and the same confidence-region samples, which keeps the
method comparison paired.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .evaluation import INF, median_inf, suboptimality, unstable_fraction
from .inference import (ConfidenceRegionSampler, InsufficientSamplesError, PosteriorSpec,
                        least_squares_estimate, residual_scatter)
from .model import LinearSystem, make_toeplitz_system, simulate_dataset
from .synthesis import (SynthesisConfig, SynthesisError, synthesize, synthesize_alternate_s,
                        synthesize_common_lyapunov, synthesize_nominal)

log = logging.getLogger(__name__)

METHODS = ("nominal", "cl", "proposed", "alternate-s")
RESULT_COLUMNS = ["trial", "n_x", "N", "method", "M", "suboptimality", "unstable_fraction",
                  "iterations", "status", "wall_time"]
SUMMARY_COLUMNS = ["N", "M", "method", "trials", "median_suboptimality", "infeasible_pct",
                   "median_unstable_pct_inclusive", "median_unstable_pct_exclusive"]


@dataclass
class BenchmarkConfig:
    n_x: int = 3
    rollout_counts: List[int] = field(default_factory=lambda: [5, 20, 80])
    T: int = 6
    trials: int = 10
    M: int = 100
    c: float = 95.0
    methods: List[str] = field(default_factory=lambda: ["nominal", "cl", "proposed"])
    seed: int = 0
    known_pi: bool = True
    # Number of fresh confidence-region models per cell for the stability
    # metric; 0 skips it.
    fresh_samples: int = 0
    q_scale: float = 1e-3
    r_scale: float = 1.0
    epsilon_conv: float = 1e-4
    max_mm_iters: int = 100

    def __post_init__(self):
        self.rollout_counts = [int(n) for n in self.rollout_counts]
        self.methods = list(self.methods)
        if self.n_x < 1 or self.T < 1 or self.trials < 1 or self.M < 1:
            raise ValueError("n_x, T, trials and M must be positive")
        if not self.rollout_counts or any(n < 1 for n in self.rollout_counts):
            raise ValueError("rollout_counts must be a nonempty list of positive integers")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if not 0.0 < self.c <= 100.0:
            raise ValueError("c must lie in (0, 100]")
        if self.fresh_samples < 0:
            raise ValueError("fresh_samples must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def synthesis_config(self) -> SynthesisConfig:
        return SynthesisConfig(self.q_scale * np.eye(self.n_x), self.r_scale * np.eye(self.n_x),
                               epsilon_conv=self.epsilon_conv, max_mm_iters=self.max_mm_iters)


def cell_streams(seed: int, trial: int, N: int):
    """Independent generators for (data, samples, fresh samples) of one cell."""
    ss = np.random.SeedSequence([seed, trial, N])
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _posterior_spec(cfg: BenchmarkConfig, truth: LinearSystem) -> PosteriorSpec:
    return PosteriorSpec(known_pi=truth.Pi if cfg.known_pi else None)


def _row(trial, cfg, N, method, M, subopt=INF, unstable=None, iterations=0, status="", wall=0.0):
    return {"trial": trial, "n_x": cfg.n_x, "N": N, "method": method, "M": M,
            "suboptimality": subopt, "unstable_fraction": unstable, "iterations": iterations,
            "status": status, "wall_time": wall}


def run_cell(cfg: BenchmarkConfig, trial: int, N: int, Ms: Sequence[int]) -> List[dict]:
    """Run every method (and every M in ``Ms``) on one (trial, N) dataset."""
    truth = make_toeplitz_system(cfg.n_x)
    rng_data, rng_samples, rng_fresh = cell_streams(cfg.seed, trial, N)
    data = simulate_dataset(truth, N, cfg.T, rng_data)
    spec = _posterior_spec(cfg, truth)
    scfg = cfg.synthesis_config()
    Q, R = scfg.Q, scfg.R
    rows: List[dict] = []

    sampler = ConfidenceRegionSampler(data, spec, cfg.c)
    fresh = None
    if cfg.fresh_samples:
        try:
            fresh = sampler(cfg.fresh_samples, rng_fresh).samples
        except InsufficientSamplesError as exc:
            log.warning("trial %d N=%d: fresh sampling failed: %s", trial, N, exc)

    A_ls, B_ls = least_squares_estimate(data)
    Pi_nominal = truth.Pi if cfg.known_pi else residual_scatter(data, A_ls, B_ls) / data.n_triples

    for M in Ms:
        # Each M gets its own child stream so the sweep is order-independent.
        rng_M = np.random.default_rng(np.random.SeedSequence([cfg.seed, trial, N, M]))
        t0 = time.perf_counter()
        try:
            samples = sampler(M, rng_M) if set(cfg.methods) - {"nominal"} else None
            infer_error = None
        except (InsufficientSamplesError, ValueError) as exc:
            samples, infer_error = None, exc
        infer_time = time.perf_counter() - t0

        for method in cfg.methods:
            t0 = time.perf_counter()
            K, iters, status = None, 0, ""
            try:
                if method == "nominal":
                    K, status = synthesize_nominal(A_ls, B_ls, scfg), "converged"
                elif samples is None:
                    status = "inference_failed"
                    log.warning("trial %d N=%d M=%d: %s", trial, N, M, infer_error)
                else:
                    if method == "proposed":
                        rep = synthesize(samples, scfg)
                    elif method == "cl":
                        rep = synthesize_common_lyapunov(samples, scfg)
                    else:
                        rep = synthesize_alternate_s(samples, A_ls, B_ls, Pi_nominal, scfg)
                    K, iters, status = rep.K, rep.iterations, rep.status
            except SynthesisError as exc:
                status = "infeasible_init"
                log.warning("trial %d N=%d %s: %s", trial, N, method, exc)
            except Exception as exc:  # recorded as a row, never aborts the sweep
                status = f"error:{type(exc).__name__}"
                log.exception("trial %d N=%d %s failed", trial, N, method)
            subopt, unstable = INF, None
            if K is not None:
                subopt = suboptimality(K, truth, Q, R)
                if fresh is not None:
                    unstable = unstable_fraction(K, fresh)[0]
            elif fresh is not None:
                unstable = 1.0
            wall = time.perf_counter() - t0 + (infer_time if method != "nominal" else 0.0)
            rows.append(_row(trial, cfg, N, method, M, subopt, unstable, iters, status, wall))
            log.info("trial=%d N=%d M=%d %s: subopt=%s unstable=%s status=%s (%.1fs)",
                     trial, N, M, method, subopt, unstable, status, wall)
    return rows


def _run_cell_args(args):
    return run_cell(*args)


def run_benchmark(cfg: BenchmarkConfig, jobs: int = 1, sweep_m: Optional[Sequence[int]] = None
                  ) -> List[dict]:
    """All cells in deterministic (trial, N, M, method) order."""
    Ms = list(sweep_m) if sweep_m else [cfg.M]
    tasks = [(cfg, trial, N, Ms) for trial in range(cfg.trials) for N in cfg.rollout_counts]
    if jobs <= 1:
        results = [run_cell(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, tasks))
    rows = [r for cell in results for r in cell]
    order = {m: i for i, m in enumerate(cfg.methods)}
    rows.sort(key=lambda r: (r["trial"], cfg.rollout_counts.index(r["N"]), Ms.index(r["M"]),
                             order[r["method"]]))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _write_csv(rows: List[dict], columns: List[str], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text


def write_results_csv(rows: List[dict], path=None) -> str:
    return _write_csv(rows, RESULT_COLUMNS, path)


def summarize(rows: List[dict]) -> List[dict]:
    """Medians per (N, M, method).

    Trials without a policy count as infinitely suboptimal. The unstable
    median is given twice: with those trials counted as 100% unstable, and
    with them left out.
    """
    groups: Dict[tuple, List[dict]] = {}
    for r in rows:
        groups.setdefault((r["N"], r["M"], r["method"]), []).append(r)
    out = []
    for (N, M, method), rs in groups.items():
        failed = [r for r in rs if r["status"] not in ("converged", "max_iters")]
        ok = [r for r in rs if r not in failed]
        inc = [r["unstable_fraction"] for r in rs if r["unstable_fraction"] is not None]
        exc = [r["unstable_fraction"] for r in ok if r["unstable_fraction"] is not None]
        out.append({
            "N": N, "M": M, "method": method, "trials": len(rs),
            "median_suboptimality": median_inf(r["suboptimality"] for r in rs),
            "infeasible_pct": 100.0 * len(failed) / len(rs),
            "median_unstable_pct_inclusive": 100.0 * median_inf(inc) if inc else None,
            "median_unstable_pct_exclusive": 100.0 * median_inf(exc) if exc else None,
        })
    return out


def write_summary_csv(summary: List[dict], path=None) -> str:
    return _write_csv(summary, SUMMARY_COLUMNS, path)


def read_results_csv(path) -> List[dict]:
    """Parse a results CSV back into typed rows (``inf`` and empty cells handled)."""
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append({
                "trial": int(r["trial"]), "n_x": int(r["n_x"]), "N": int(r["N"]),
                "method": r["method"], "M": int(r["M"]),
                "suboptimality": float(r["suboptimality"]),
                "unstable_fraction": float(r["unstable_fraction"]) if r["unstable_fraction"] else None,
                "iterations": int(r["iterations"]), "status": r["status"],
                "wall_time": float(r["wall_time"]),
            })
    return rows
