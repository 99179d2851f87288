"""Command-line front end: simulate, infer, synthesize, evaluate, bench.

Exit codes: 0 ok, 1 synthesis hit the iteration cap, 2 usage or I/O error,
3 inference failure, 4 synthesis infeasible, 5 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bench, serialization as ser
from .evaluation import INF, evaluate_policy, unstable_fraction
from .inference import (ConfidenceRegionSampler, GibbsError, ImproperPosteriorError,
                        InsufficientExcitationError, InsufficientSamplesError, PosteriorSpec,
                        least_squares_estimate, residual_scatter)
from .model import Dataset, make_toeplitz_system, simulate_dataset
from .synthesis import (SynthesisConfig, SynthesisError, synthesize, synthesize_alternate_s,
                        synthesize_common_lyapunov, synthesize_nominal)

log = logging.getLogger("bayes_lqr")

EXIT_OK, EXIT_MAX_ITERS, EXIT_USAGE, EXIT_INFERENCE, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _read(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    try:
        return ser.read_json(p)
    except ValueError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from exc


def _matrix(path) -> np.ndarray:
    d = _read(path)
    return np.atleast_2d(np.array(d if isinstance(d, list) else d["matrix"], dtype=float))


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def _int_list(v: str) -> List[int]:
    try:
        out = [int(x) for x in v.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {v!r}") from exc
    if not out or any(x < 1 for x in out):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {v!r}")
    return out


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _rng(args) -> np.random.Generator:
    return np.random.default_rng(args.seed)


def _known_pi(value: str, n_x: int) -> np.ndarray:
    if value == "identity":
        return np.eye(n_x)
    return _matrix(value)


def _load_dataset(path) -> Dataset:
    try:
        return ser.dataset_from_dict(_read(path))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"{path}: malformed dataset ({exc})") from exc


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    if args.system:
        truth = ser.system_from_dict(_read(args.system))
    else:
        truth = make_toeplitz_system(args.nx)
    data = simulate_dataset(truth, args.rollouts, args.horizon, _rng(args))
    out = _out(args, "dataset.json")
    ser.write_json(out, ser.dataset_to_dict(data))
    log.info("wrote %d rollouts of horizon %d to %s", args.rollouts, args.horizon, out)
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.gibbs and args.known_pi is not None:
        raise UsageError("--gibbs and --known-pi are mutually exclusive")
    data = _load_dataset(args.data)
    if args.gibbs:
        spec = PosteriorSpec(known_pi=None, pi_prior=args.pi_prior)
    else:
        spec = PosteriorSpec(known_pi=_known_pi(args.known_pi or "identity", data.n_x))
    sampler = ConfidenceRegionSampler(data, spec, args.confidence, burn_in=args.burn_in,
                                      thin=args.thin)
    try:
        ss = sampler(args.samples, _rng(args), args.pool)
    except InsufficientSamplesError as exc:
        log.error("%s (survivors=%d, requested=%d)", exc, exc.survivors, exc.requested)
        return EXIT_INFERENCE
    except (InsufficientExcitationError, ImproperPosteriorError, GibbsError) as exc:
        log.error("inference failed: %s", exc)
        return EXIT_INFERENCE
    log.info("pool=%d weight_discards=%d unstabilizable_discards=%d kept=%d",
             ss.pool_size, ss.weight_discards, ss.unstabilizable_discards, len(ss.samples))
    out = _out(args, "samples.json")
    ser.write_json(out, ser.sampleset_to_dict(ss))
    return EXIT_OK


def _cost_matrices(args, n_x: int, n_u: int):
    Q = _matrix(args.q_file) if args.q_file else args.q_scale * np.eye(n_x)
    R = _matrix(args.r_file) if args.r_file else args.r_scale * np.eye(n_u)
    if Q.shape != (n_x, n_x) or R.shape != (n_u, n_u):
        raise UsageError(f"Q must be {n_x}x{n_x} and R {n_u}x{n_u}")
    return Q, R


def cmd_synthesize(args) -> int:
    ss = ser.sampleset_from_dict(_read(args.samples))
    if not ss.samples:
        raise UsageError("sample set is empty")
    n_x, n_u = ss.samples[0].n_x, ss.samples[0].n_u
    Q, R = _cost_matrices(args, n_x, n_u)
    try:
        cfg = SynthesisConfig(Q, R, epsilon_conv=args.tol, max_mm_iters=args.max_iters,
                              enforce_common_lyap_certificate=args.certificate)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = None
    if args.method in ("nominal", "alternate-s"):
        if not args.data:
            raise UsageError(f"--method {args.method} needs --data for the least-squares model")
        data = _load_dataset(args.data)
    extra = {"certificate_X": None}
    if args.method == "nominal":
        A_ls, B_ls = least_squares_estimate(data)
        try:
            K = synthesize_nominal(A_ls, B_ls, cfg)
        except SynthesisError as exc:
            log.error("%s", exc)
            ser.write_json(_out(args, "policy.json"),
                           ser.policy_to_dict(None, Q, R, "nominal", status="infeasible_init"))
            return EXIT_INFEASIBLE
        ser.write_json(_out(args, "policy.json"),
                       ser.policy_to_dict(K, Q, R, "nominal", status="converged"))
        return EXIT_OK
    if args.method == "proposed":
        rep = synthesize(ss, cfg)
    elif args.method == "cl":
        rep = synthesize_common_lyapunov(ss, cfg)
    else:
        A_ls, B_ls = least_squares_estimate(data)
        Pi_nom = ss.samples[0].Pi if np.ptp([s.Pi for s in ss.samples], axis=0).max() == 0 \
            else residual_scatter(data, A_ls, B_ls) / data.n_triples
        rep = synthesize_alternate_s(ss, A_ls, B_ls, Pi_nom, cfg)
    if rep.certificate is not None:
        extra["certificate_X"] = np.asarray(rep.certificate[0]).tolist()
    extra["bound_trace"] = [ser.encode_float(b) for b in rep.bound_trace]
    ser.write_json(_out(args, "policy.json"),
                   ser.policy_to_dict(rep.K, Q, R, rep.method, rep.cost_trace, rep.status,
                                      rep.iterations, extra))
    log.info("%s: status=%s iterations=%d final J_M=%s", rep.method, rep.status, rep.iterations,
             rep.cost_trace[-1] if rep.cost_trace else "n/a")
    if rep.status == "infeasible_init":
        log.error("synthesis infeasible: common-Lyapunov initialization failed")
        return EXIT_INFEASIBLE
    return EXIT_MAX_ITERS if rep.status == "max_iters" else EXIT_OK


def cmd_evaluate(args) -> int:
    K, Q, R = ser.policy_from_dict(_read(args.policy))
    truth = ser.system_from_dict(_read(args.truth)) if args.truth else make_toeplitz_system(Q.shape[0])
    if K is None:
        report = {"suboptimality": "inf", "cost_on_truth": "inf", "optimal_cost": None,
                  "unstable_fraction": None, "note": "policy file holds no gain"}
        ser.write_json(_out(args, "report.json"), report)
        print("suboptimality inf (no policy)")
        return EXIT_OK
    rep = evaluate_policy(K, truth, Q, R)
    if args.robust_samples:
        if not args.data:
            raise UsageError("--robust-samples needs --data")
        data = _load_dataset(args.data)
        spec = PosteriorSpec(known_pi=_known_pi(args.known_pi, data.n_x))
        sampler = ConfidenceRegionSampler(data, spec, args.confidence)
        try:
            fresh = sampler(args.robust_samples, _rng(args))
        except InsufficientSamplesError as exc:
            log.error("%s", exc)
            return EXIT_INFERENCE
        rep.unstable_fraction, rep.unstable_count, rep.fresh_count = unstable_fraction(K, fresh.samples)
    ser.write_json(_out(args, "report.json"), rep.to_dict())
    sub = "inf" if rep.suboptimality == INF else f"{rep.suboptimality:.6g}"
    line = f"suboptimality {sub}"
    if rep.unstable_fraction is not None:
        line += f"  unstable_fraction {rep.unstable_fraction:.6g} ({rep.unstable_count}/{rep.fresh_count})"
    print(line)
    return EXIT_OK


def cmd_bench(args) -> int:
    d = _read(args.config) if args.config else {}
    overrides = {"n_x": args.nx, "rollout_counts": args.rollouts, "T": args.horizon,
                 "trials": args.trials, "M": args.samples, "c": args.confidence,
                 "methods": args.methods.split(",") if args.methods else None,
                 "fresh_samples": args.fresh_samples, "seed": args.seed,
                 "known_pi": False if args.gibbs else None}
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = bench.BenchmarkConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid benchmark config: {exc}") from exc
    if args.sweep_m and len(cfg.rollout_counts) != 1:
        log.warning("--sweep-m with several N values: sweeping M at each N")
    out = _out(args, "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    ser.write_json(out / "config.json", cfg.to_dict())
    rows = bench.run_benchmark(cfg, jobs=args.jobs, sweep_m=args.sweep_m)
    bench.write_results_csv(rows, out / "results.csv")
    summary = bench.summarize(rows)
    print(bench.write_summary_csv(summary, out / "summary.csv"), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes for bench")
    common.add_argument("--out", default=None, help="output file (or directory for bench)")
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="bayes-lqr",
                                     description="Robust LQR from Bayesian posterior samples.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate rollouts of a true system")
    p.add_argument("--nx", type=_positive, default=3)
    p.add_argument("--rollouts", type=_positive, required=True)
    p.add_argument("--horizon", type=_positive, default=6)
    p.add_argument("--system", help="JSON file with A, B, Pi (default: Toeplitz truth)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", parents=[common], help="sample the confidence region")
    p.add_argument("--data", required=True)
    p.add_argument("--confidence", type=float, default=95.0)
    p.add_argument("--samples", type=_positive, default=100, help="number of models M")
    p.add_argument("--pool", type=_positive, default=None, help="pool size (default 20*M)")
    p.add_argument("--known-pi", default=None,
                   help="'identity' or a JSON matrix file (default identity)")
    p.add_argument("--gibbs", action="store_true", help="sample Pi jointly by Gibbs")
    p.add_argument("--pi-prior", choices=["jeffreys", "none"], default="jeffreys")
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--thin", type=_positive, default=10)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synthesize", parents=[common], help="synthesize a feedback gain")
    p.add_argument("--samples", required=True, help="sample-set JSON")
    p.add_argument("--method", choices=list(bench.METHODS), default="proposed")
    p.add_argument("--data", help="dataset JSON (needed by nominal and alternate-s)")
    p.add_argument("--q-scale", type=float, default=1e-3)
    p.add_argument("--r-scale", type=float, default=1.0)
    p.add_argument("--q-file")
    p.add_argument("--r-file")
    p.add_argument("--tol", type=float, default=1e-4, help="relative MM stopping tolerance")
    p.add_argument("--max-iters", type=_positive, default=100)
    p.add_argument("--certificate", action="store_true",
                   help="keep a shared Lyapunov certificate through the MM iterations")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a policy on the truth")
    p.add_argument("--policy", required=True)
    p.add_argument("--truth", help="system JSON (default: Toeplitz truth)")
    p.add_argument("--data", help="dataset JSON for the fresh-sample stability check")
    p.add_argument("--robust-samples", type=int, default=0)
    p.add_argument("--confidence", type=float, default=95.0)
    p.add_argument("--known-pi", default="identity")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", parents=[common], help="run the seeded benchmark grid")
    p.add_argument("--config", help="JSON file mirroring BenchmarkConfig")
    p.add_argument("--nx", type=_positive)
    p.add_argument("--rollouts", type=_int_list, help="comma-separated N values")
    p.add_argument("--horizon", type=_positive)
    p.add_argument("--trials", type=_positive)
    p.add_argument("--samples", type=_positive, help="M")
    p.add_argument("--confidence", type=float)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(bench.METHODS)}")
    p.add_argument("--fresh-samples", type=int, help="fresh models for the stability metric")
    p.add_argument("--gibbs", action="store_true", help="unknown noise covariance")
    p.add_argument("--sweep-m", type=_int_list, help="comma-separated M values")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "bench" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_USAGE
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
