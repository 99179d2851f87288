"""Ground-truth LQR costs, suboptimality, and stability certification."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .model import GainPolicy, LinearSystem, is_stabilizable, spectral_radius

INF = float("inf")


class UnstableError(ValueError):
    """Raised when a Lyapunov solve is requested for a non-Schur matrix."""


class RiccatiError(RuntimeError):
    pass


def _gain(K) -> np.ndarray:
    return K.K if isinstance(K, GainPolicy) else np.atleast_2d(np.asarray(K, dtype=float))


def dlyap(A_cl, W) -> np.ndarray:
    """Solve ``X = A_cl' X A_cl + W`` for Schur-stable ``A_cl``."""
    A = np.atleast_2d(np.asarray(A_cl, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = A.shape[0]
    if spectral_radius(A) >= 1.0:
        raise UnstableError("closed loop is not Schur stable; Lyapunov solution undefined")
    if n <= 20:
        # Column-major vec: vec(A' X A) = (A' kron A') vec(X).
        lhs = np.eye(n * n) - np.kron(A.T, A.T)
        X = np.linalg.solve(lhs, W.reshape(-1, order="F")).reshape(n, n, order="F")
        X = 0.5 * (X + X.T)
        # One step of iterative refinement on the defining equation.
        resid = A.T @ X @ A + W - X
        dX = np.linalg.solve(lhs, resid.reshape(-1, order="F")).reshape(n, n, order="F")
        X = X + 0.5 * (dX + dX.T)
    else:
        X = scipy.linalg.solve_discrete_lyapunov(A.T, W)
        X = 0.5 * (X + X.T)
    return X


def lyapunov_residual(A_cl, W, X) -> float:
    return float(np.linalg.norm(A_cl.T @ X @ A_cl + W - X))


def cost_lqr(K, theta: LinearSystem, Q, R) -> float:
    """Stationary cost ``trace(X Pi)``, or ``inf`` when ``A + B K`` is not Schur stable."""
    K = _gain(K)
    A_cl = theta.closed_loop(K)
    if spectral_radius(A_cl) >= 1.0:
        return INF
    X = dlyap(A_cl, Q + K.T @ R @ K)
    return float(np.trace(X @ theta.Pi))


def riccati_residual(A, B, Q, R, X) -> float:
    BtX = B.T @ X
    rhs = A.T @ X @ A - A.T @ X @ B @ np.linalg.solve(R + BtX @ B, BtX @ A) + Q
    return float(np.linalg.norm(rhs - X))


def dare(A, B, Q, R, max_iters: int = 100, tol: float = 1e-14) -> Tuple[np.ndarray, GainPolicy]:
    """Stabilizing DARE solution by the structured doubling algorithm.

    Iterates on ``X = A' X (I + G X)^{-1} A + Q`` with ``G = B R^{-1} B'``;
    the ``H`` sequence converges quadratically to ``X``. Returns ``X`` and the
    optimal gain ``K = -(R + B'XB)^{-1} B'XA`` (so ``u = K x``).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not is_stabilizable(A, B):
        raise RiccatiError("(A, B) is not stabilizable")
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Gk = 0.5 * (Gk + Gk.T)
    Hk = Q.copy()
    eye = np.eye(n)
    for _ in range(max_iters):
        W = eye + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_next = Hk + Ak.T @ Hk @ WA
        G_next = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        Hk_old, Hk = Hk, 0.5 * (H_next + H_next.T)
        Gk = 0.5 * (G_next + G_next.T)
        if np.linalg.norm(Hk - Hk_old) <= tol * max(1.0, np.linalg.norm(Hk)):
            break
    else:
        raise RiccatiError("doubling iteration did not converge")
    X = Hk
    if not np.all(np.isfinite(X)):
        raise RiccatiError("doubling iteration diverged")
    K = -np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
    if riccati_residual(A, B, Q, R, X) > 1e-8 * max(1.0, np.linalg.norm(X)):
        raise RiccatiError("Riccati residual above tolerance")
    if spectral_radius(A + B @ K) >= 1.0:
        raise RiccatiError("Riccati solution is not stabilizing (check detectability)")
    return X, GainPolicy(K)


def optimal_cost(theta: LinearSystem, Q, R) -> float:
    X, _ = dare(theta.A, theta.B, Q, R)
    return float(np.trace(X @ theta.Pi))


def suboptimality(K, truth: LinearSystem, Q, R) -> float:
    """``cost(K) / cost(K_lqr)`` on the true system; ``inf`` if K destabilizes it."""
    _, K_opt = dare(truth.A, truth.B, Q, R)
    best = cost_lqr(K_opt, truth, Q, R)
    cost = cost_lqr(K, truth, Q, R)
    if math.isinf(cost):
        return INF
    if best == 0.0:
        return 1.0 if cost == 0.0 else INF
    return cost / best


@dataclass
class CertificateCheck:
    valid: bool
    violating_index: Optional[int] = None
    max_vertex_eig: float = -INF
    max_combination_radius: float = 0.0
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


def verify_convex_hull_certificate(K, X, systems: Sequence, trials: int,
                                   rng: np.random.Generator) -> CertificateCheck:
    """Check a shared Lyapunov matrix ``X`` for every vertex ``(A_i, B_i)`` under ``K``.

    Every vertex needs ``max eig((A+BK)' X (A+BK) - X) <= -1e-9 ||X||``;
    then ``trials`` random convex combinations of the vertices are checked
    for spectral radius below one.
    """
    K = _gain(K)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    pairs = [(s.A, s.B) if isinstance(s, LinearSystem) else (np.asarray(s[0]), np.asarray(s[1]))
             for s in systems]
    if np.linalg.eigvalsh(0.5 * (X + X.T))[0] <= 0:
        return CertificateCheck(False, None, reason="X is not positive definite")
    bound = -1e-9 * np.linalg.norm(X, 2)
    worst = -INF
    for i, (A, B) in enumerate(pairs):
        Acl = A + B @ K
        D = Acl.T @ X @ Acl - X
        lam = float(np.linalg.eigvalsh(0.5 * (D + D.T))[-1])
        worst = max(worst, lam)
        if lam > bound:
            return CertificateCheck(False, i, worst, reason=f"vertex {i} violates the Lyapunov decrease")
    As = np.stack([p[0] for p in pairs])
    Bs = np.stack([p[1] for p in pairs])
    rho_max = 0.0
    for t in range(trials):
        w = rng.dirichlet(np.ones(len(pairs)))
        A = np.tensordot(w, As, axes=1)
        B = np.tensordot(w, Bs, axes=1)
        rho = spectral_radius(A + B @ K)
        rho_max = max(rho_max, rho)
        if rho >= 1.0:
            return CertificateCheck(False, None, worst, rho_max,
                                    reason=f"convex combination {t} is unstable")
    return CertificateCheck(True, None, worst, rho_max)


def unstable_fraction(K, systems: Iterable[LinearSystem]) -> Tuple[float, int, int]:
    """Fraction of systems with closed-loop spectral radius >= 1, plus (unstable, total)."""
    K = _gain(K)
    systems = list(systems)
    bad = sum(spectral_radius(s.closed_loop(K)) >= 1.0 for s in systems)
    return (bad / len(systems) if systems else float("nan")), bad, len(systems)


def robustness_check(K, fresh_sampler: Callable[[int, np.random.Generator], Sequence[LinearSystem]],
                     n_fresh: int, rng: np.random.Generator) -> Tuple[float, int, int]:
    """Draw ``n_fresh`` models from an independent confidence-region sampler and
    return the closed-loop unstable fraction with its counts."""
    fresh = fresh_sampler(n_fresh, rng)
    systems = getattr(fresh, "samples", fresh)
    return unstable_fraction(K, systems)


@dataclass
class EvaluationReport:
    suboptimality: float
    cost_on_truth: float
    optimal_cost: float
    unstable_fraction: Optional[float] = None
    unstable_count: Optional[int] = None
    fresh_count: Optional[int] = None
    certificate_valid: Optional[bool] = None

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in asdict(self).items()}


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def evaluate_policy(K, truth: LinearSystem, Q, R) -> EvaluationReport:
    _, K_opt = dare(truth.A, truth.B, Q, R)
    best = cost_lqr(K_opt, truth, Q, R)
    cost = cost_lqr(K, truth, Q, R)
    return EvaluationReport(suboptimality(K, truth, Q, R), cost, best)


def median_inf(values: Iterable[float]) -> float:
    """Median with ``inf`` sorted last; NaNs are dropped."""
    vals = sorted(v for v in values if not (isinstance(v, float) and math.isnan(v)))
    if not vals:
        return float("nan")
    mid = len(vals) // 2
    if len(vals) % 2:
        return float(vals[mid])
    lo, hi = vals[mid - 1], vals[mid]
    if math.isinf(hi):
        return INF
    return 0.5 * (lo + hi)
