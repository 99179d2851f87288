"""Static-gain policy synthesis for the Monte-Carlo expected LQR cost.

The pipeline is: a common-Lyapunov SDP gives a gain that stabilizes every
sampled model; then a majorize-minimization loop repeatedly minimizes a
convex upper bound of the sampled cost that is tight at the current gain.
The bound replaces ``X^{-1}`` in the cost LMI with its first-order Taylor
expansion about the current Lyapunov solution, which under-approximates
``X^{-1}`` and therefore shrinks the feasible set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import lmi
from .evaluation import INF, cost_lqr, dare, dlyap
from .model import GainPolicy, LinearSystem, is_stabilizable, spectral_radius

log = logging.getLogger(__name__)


class SynthesisError(RuntimeError):
    pass


class InfeasibleInitError(SynthesisError):
    """The common-Lyapunov program has no solution for this sample set."""


class SdpFailure(SynthesisError):
    def __init__(self, message, solution: Optional[lmi.SdpSolution] = None):
        super().__init__(message)
        self.solution = solution


@dataclass
class SynthesisConfig:
    Q: np.ndarray
    R: np.ndarray
    epsilon_conv: float = 1e-4
    max_mm_iters: int = 100
    enforce_common_lyap_certificate: bool = False
    epsilon_psd: Optional[float] = None
    # Upper end of the compact PSD approximation; kept for completeness, never imposed.
    psd_ceiling: float = 1e9
    feas_tol: float = lmi.FEAS_TOL
    gap_tol: float = lmi.GAP_TOL
    sdp_max_iters: int = lmi.MAX_ITERS

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))[0] < -1e-12 * max(1.0, np.abs(self.Q).max()):
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(0.5 * (self.R + self.R.T))[0] <= 0:
            raise ValueError("R must be positive definite")
        if not self.epsilon_conv > 0:
            raise ValueError("epsilon_conv must be positive")
        if self.epsilon_psd is None:
            self.epsilon_psd = 1e-6 * (1.0 + np.linalg.norm(self.Q, 2))

    @property
    def R_inv(self) -> np.ndarray:
        L = np.linalg.cholesky(self.R)
        Li = np.linalg.solve(L, np.eye(len(L)))
        return Li.T @ Li

    @property
    def Q_half(self) -> np.ndarray:
        w, V = np.linalg.eigh(0.5 * (self.Q + self.Q.T))
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass
class SynthesisReport:
    K: Optional[GainPolicy]
    cost_trace: List[float]
    iterations: int
    status: str
    method: str = "proposed"
    certificate: Optional[tuple] = None
    gains: List[np.ndarray] = field(default_factory=list, repr=False)
    bound_trace: List[float] = field(default_factory=list)
    cl_objective: float = float("nan")

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1] if self.cost_trace else INF


@dataclass
class CommonLyapunovResult:
    K: GainPolicy
    objective: float
    Y: np.ndarray
    solution: lmi.SdpSolution

    @property
    def lyapunov_matrix(self) -> np.ndarray:
        X = np.linalg.inv(self.Y)
        return 0.5 * (X + X.T)


@dataclass
class MMStep:
    K: GainPolicy
    bound_value: float
    X: List[np.ndarray]
    solution: lmi.SdpSolution
    X_common: Optional[np.ndarray] = None


def _systems(samples) -> List[LinearSystem]:
    return list(getattr(samples, "samples", samples))


def mc_cost(K, systems: Sequence[LinearSystem], Q, R) -> float:
    """Sample average of the LQR cost; ``inf`` if any model is destabilized."""
    total = 0.0
    for s in systems:
        c = cost_lqr(K, s, Q, R)
        if math.isinf(c):
            return INF
        total += c
    return total / len(systems)


def _solve(problem, cfg: SynthesisConfig) -> lmi.SdpSolution:
    return lmi.solve(problem, cfg.feas_tol, cfg.gap_tol, cfg.sdp_max_iters)


def _common_lyapunov(constraint_systems, cost_systems, cfg: SynthesisConfig) -> CommonLyapunovResult:
    if not constraint_systems or not cost_systems:
        raise ValueError("need at least one sampled model")
    n, m = constraint_systems[0].n_x, constraint_systems[0].n_u
    Qh, Rinv = cfg.Q_half, cfg.R_inv
    prob = lmi.SdpProblem()
    Y = prob.register_symmetric_variable("Y", n).expr()
    L = prob.register_rectangular_variable("L", m, n).expr()
    I_n = np.eye(n)
    prob.add_psd_block(Y - cfg.epsilon_psd * I_n, "Y_lower")
    for i, s in enumerate(cost_systems):
        Z = prob.register_symmetric_variable(f"Z{i}", n).expr()
        prob.add_objective(Z.trace() * (1.0 / len(cost_systems)))
        prob.add_psd_block(lmi.bmat([[Z, s.G.T], [s.G, Y]]), f"slack{i}")
    for i, s in enumerate(constraint_systems):
        AYBL = s.A @ Y + s.B @ L
        QY = Qh @ Y
        prob.add_psd_block(lmi.bmat([
            [Y, AYBL.T, QY.T, L.T],
            [AYBL, Y, None, None],
            [QY, None, I_n, None],
            [L, None, None, Rinv],
        ]), f"lyap{i}")
    sol = _solve(prob, cfg)
    if sol.status == "infeasible":
        raise InfeasibleInitError("common-Lyapunov program is infeasible")
    if not sol.optimal:
        raise SdpFailure(f"common-Lyapunov SDP failed ({sol.solver_status})", sol)
    Yv = prob.variables["Y"].value(sol.x)
    if np.linalg.eigvalsh(Yv)[0] < 0.5 * cfg.epsilon_psd:
        raise SdpFailure("common Lyapunov matrix Y is numerically singular", sol)
    Lv = prob.variables["L"].value(sol.x)
    K = np.linalg.solve(Yv.T, Lv.T).T
    return CommonLyapunovResult(GainPolicy(K), sol.objective_value, Yv, sol)


def solve_common_lyapunov(samples, cfg: SynthesisConfig) -> CommonLyapunovResult:
    """Common-Lyapunov relaxation: shared ``Y``, ``L`` with ``K = L Y^{-1}``.

    The objective ``mean_i trace(Z_i)`` upper-bounds the sampled cost of
    ``K`` and is exact when a single model is supplied.
    """
    systems = _systems(samples)
    return _common_lyapunov(systems, systems, cfg)


def taylor_inverse(S, S0) -> np.ndarray:
    """First-order expansion of ``S^{-1}`` about ``S0``: ``S0^-1 - S0^-1 (S - S0) S0^-1``."""
    S0_inv = np.linalg.inv(S0)
    return S0_inv - S0_inv @ (S - S0) @ S0_inv


def _sqrt_psd(S: np.ndarray):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.clip(w, 0.0, None)
    half = (V * np.sqrt(w)) @ V.T
    inv_half = (V / np.sqrt(w)) @ V.T
    return half, inv_half


def _taylor_block(S_bar: np.ndarray, Xi: lmi.AffineExpr):
    """Congruence-scaled Taylor term in normalized coordinates.

    With ``X = H Xi H`` and ``H = S_bar^{1/2}``, ``H T(X, S_bar) H = 2I - Xi``,
    so the linearized inverse becomes an O(1) expression at the anchor.
    """
    n = S_bar.shape[0]
    return 2.0 * np.eye(n) - Xi


def compute_anchor(K_bar, theta: LinearSystem, cfg: SynthesisConfig) -> np.ndarray:
    """Lyapunov solution at ``K_bar``; ``trace(X_bar Pi)`` is the cost of ``K_bar``."""
    K = K_bar.K if isinstance(K_bar, GainPolicy) else np.atleast_2d(K_bar)
    A_cl = theta.closed_loop(K)
    if spectral_radius(A_cl) >= 1.0:
        raise SynthesisError("anchor undefined (infinite cost): closed loop is not Schur stable")
    return dlyap(A_cl, cfg.Q + K.T @ cfg.R @ K)


def _bound_problem(systems, anchors, weights, cfg: SynthesisConfig, fixed_K=None,
                   common_anchor=None):
    """Bound SDP in normalized coordinates ``X_i = H_i Xi_i H_i``, ``H_i = X_bar_i^{1/2}``.

    Each cost LMI is congruence-transformed by ``diag(H_i^{-1}, H_i, I)``,
    which leaves its feasible set unchanged while keeping every entry of
    order one; ``Xi_i = I`` recovers the anchor.
    """
    n, m = systems[0].n_x, systems[0].n_u
    prob = lmi.SdpProblem()
    if fixed_K is None:
        K = prob.register_rectangular_variable("K", m, n).expr()
    else:
        K = lmi.AffineExpr(np.atleast_2d(fixed_K))
    Rinv = cfg.R_inv
    eps_I = cfg.epsilon_psd * np.eye(n)
    scales = []
    for i, (s, X_bar, w) in enumerate(zip(systems, anchors, weights)):
        H, H_inv = _sqrt_psd(X_bar)
        scales.append(H)
        Xi = prob.register_symmetric_variable(f"X{i}", n).expr()
        X = H @ Xi @ H
        if w:
            prob.add_objective(w * lmi.trace_inner(s.Pi, X))
        Acl = s.A + s.B @ K
        prob.add_psd_block(lmi.bmat([
            [Xi - H_inv @ cfg.Q @ H_inv, (H @ Acl @ H_inv).T, (K @ H_inv).T],
            [H @ Acl @ H_inv, _taylor_block(X_bar, Xi), None],
            [K @ H_inv, None, Rinv],
        ]), f"bound{i}")
        prob.add_psd_block(X - eps_I, f"X{i}_lower")
    if common_anchor is not None:
        H, H_inv = _sqrt_psd(common_anchor)
        scales.append(H)
        Xi = prob.register_symmetric_variable("Xc", n).expr()
        prob.add_psd_block(H @ Xi @ H - eps_I, "Xc_lower")
        for i, s in enumerate(systems):
            Acl = s.A + s.B @ K
            prob.add_psd_block(lmi.bmat([
                [Xi - H_inv @ eps_I @ H_inv, (H @ Acl @ H_inv).T],
                [H @ Acl @ H_inv, _taylor_block(common_anchor, Xi)],
            ]), f"common{i}")
    return prob, scales


def _mm_step(systems, anchors, weights, cfg, common_anchor=None) -> MMStep:
    prob, H = _bound_problem(systems, anchors, weights, cfg, common_anchor=common_anchor)
    sol = _solve(prob, cfg)
    if not sol.optimal:
        raise SdpFailure(f"MM-step SDP failed ({sol.status}, {sol.solver_status})", sol)
    K = prob.variables["K"].value(sol.x)
    Xs = [H[i] @ prob.variables[f"X{i}"].value(sol.x) @ H[i] for i in range(len(systems))]
    Xc = None
    if common_anchor is not None:
        Xc = H[-1] @ prob.variables["Xc"].value(sol.x) @ H[-1]
        Xc = 0.5 * (Xc + Xc.T)
    return MMStep(GainPolicy(K), sol.objective_value, Xs, sol, Xc)


def mm_step(K_k, samples, anchors, cfg: SynthesisConfig, common_anchor=None) -> MMStep:
    """Minimize the convex bound anchored at ``K_k`` over ``K``.

    ``anchors`` are the Lyapunov solutions at ``K_k`` for each sample.
    With ``common_anchor`` (a shared Lyapunov matrix valid at ``K_k``), a
    linearized common-Lyapunov decrease is also imposed for every sample.
    """
    systems = _systems(samples)
    if len(anchors) != len(systems):
        raise ValueError("one anchor per sample is required")
    weights = [1.0 / len(systems)] * len(systems)
    return _mm_step(systems, anchors, weights, cfg, common_anchor)


def bound_value(K, K_bar, samples, cfg: SynthesisConfig) -> float:
    """Evaluate the convex bound at ``K`` with anchors taken at ``K_bar``; ``inf`` if infeasible."""
    systems = _systems(samples)
    anchors = [compute_anchor(K_bar, s, cfg) for s in systems]
    K = K.K if isinstance(K, GainPolicy) else np.atleast_2d(K)
    prob, _ = _bound_problem(systems, anchors, [1.0 / len(systems)] * len(systems), cfg, fixed_K=K)
    sol = _solve(prob, cfg)
    if sol.status == "infeasible":
        return INF
    if not sol.optimal:
        raise SdpFailure(f"bound evaluation SDP failed ({sol.solver_status})", sol)
    return sol.objective_value


def _iterate(K0: GainPolicy, systems, weights, cost_fn, cfg: SynthesisConfig, method: str,
             cl_objective: float, common_anchor=None) -> SynthesisReport:
    K = K0
    J = cost_fn(K)
    trace, gains, bounds = [J], [K.K.copy()], []
    status = "max_iters"
    steps = 0
    if math.isinf(J):
        raise SynthesisError("initial gain has infinite sampled cost")
    for _ in range(cfg.max_mm_iters):
        anchors = [compute_anchor(K, s, cfg) for s in systems]
        try:
            step = _mm_step(systems, anchors, weights, cfg, common_anchor)
        except SdpFailure as exc:
            log.warning("%s; returning last iterate", exc)
            status = "max_iters"
            break
        J_new = cost_fn(step.K)
        if not J_new <= J:
            # Exact MM never ascends; an ascent means the solver's precision floor was reached.
            log.debug("MM step ascended by %.3e; keeping previous iterate", J_new - J)
            status = "converged"
            break
        steps += 1
        K, J_prev, J = step.K, J, J_new
        trace.append(J)
        gains.append(K.K.copy())
        bounds.append(step.bound_value)
        if step.X_common is not None:
            common_anchor = step.X_common
        if abs(J - J_prev) <= cfg.epsilon_conv * (1.0 + abs(J)):
            status = "converged"
            break
    certificate = None
    if common_anchor is not None:
        certificate = (common_anchor, list(systems))
    return SynthesisReport(K, trace, steps, status, method, certificate, gains, bounds, cl_objective)


def synthesize(samples, cfg: SynthesisConfig) -> SynthesisReport:
    """Common-Lyapunov initialization followed by MM refinement until the
    sampled cost changes by at most ``epsilon_conv * (1 + |J|)``."""
    systems = _systems(samples)
    if not systems:
        raise ValueError("sample set is empty")
    try:
        cl = _common_lyapunov(systems, systems, cfg)
    except InfeasibleInitError:
        return SynthesisReport(None, [], 0, "infeasible_init", "proposed")
    except SdpFailure as exc:
        log.warning("common-Lyapunov initialization failed: %s", exc)
        return SynthesisReport(None, [], 0, "infeasible_init", "proposed")
    weights = [1.0 / len(systems)] * len(systems)
    common_anchor = cl.lyapunov_matrix if cfg.enforce_common_lyap_certificate else None
    return _iterate(cl.K, systems, weights, lambda K: mc_cost(K, systems, cfg.Q, cfg.R), cfg,
                    "proposed", cl.objective, common_anchor)


def synthesize_common_lyapunov(samples, cfg: SynthesisConfig) -> SynthesisReport:
    """The common-Lyapunov gain alone, reported with its shared certificate."""
    systems = _systems(samples)
    try:
        cl = _common_lyapunov(systems, systems, cfg)
    except (InfeasibleInitError, SdpFailure):
        return SynthesisReport(None, [], 0, "infeasible_init", "cl")
    J = mc_cost(cl.K, systems, cfg.Q, cfg.R)
    return SynthesisReport(cl.K, [J], 0, "converged", "cl", (cl.lyapunov_matrix, systems),
                           [cl.K.K.copy()], [], cl.objective)


def synthesize_nominal(A_ls, B_ls, cfg: SynthesisConfig) -> GainPolicy:
    if not is_stabilizable(A_ls, B_ls):
        raise SynthesisError("nominal model is not stabilizable")
    _, K = dare(A_ls, B_ls, cfg.Q, cfg.R)
    return K


def synthesize_alternate_s(samples, A_ls, B_ls, Pi_nominal, cfg: SynthesisConfig) -> SynthesisReport:
    """Optimize the nominal-model cost while keeping every sample stabilized.

    Same pipeline as :func:`synthesize`, but only the nominal model carries
    an objective term; sampled models contribute cost-free constraints.
    """
    nominal = LinearSystem(A_ls, B_ls, Pi_nominal)
    samples = _systems(samples)
    systems = [nominal] + samples
    try:
        cl = _common_lyapunov(systems, [nominal], cfg)
    except (InfeasibleInitError, SdpFailure):
        return SynthesisReport(None, [], 0, "infeasible_init", "alternate-s")
    weights = [1.0] + [0.0] * len(samples)
    common_anchor = cl.lyapunov_matrix if cfg.enforce_common_lyap_certificate else None

    def nominal_cost(K):
        if any(spectral_radius(s.closed_loop(K.K)) >= 1.0 for s in samples):
            return INF
        return cost_lqr(K, nominal, cfg.Q, cfg.R)

    return _iterate(cl.K, systems, weights, nominal_cost, cfg, "alternate-s", cl.objective,
                    common_anchor)
