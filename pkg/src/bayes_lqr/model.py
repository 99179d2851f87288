"""Linear-Gaussian system types, rollout simulation and the Toeplitz benchmark family."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import toeplitz

InputSource = Callable[[np.random.Generator, int], np.ndarray]


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def psd_factor(Pi: np.ndarray) -> np.ndarray:
    """Lower-triangular G with G @ G.T == Pi, tolerating singular PSD Pi."""
    scale = max(np.linalg.norm(Pi), 1.0)
    try:
        return np.linalg.cholesky(Pi)
    except np.linalg.LinAlgError:
        pass
    # Singular PSD: eigen square root, then QR to recover a triangular factor.
    w, V = np.linalg.eigh(Pi)
    if w.min() < -1e-10 * scale:
        raise ValueError("Pi is not positive semidefinite")
    half = V * np.sqrt(np.clip(w, 0.0, None))
    # half @ half.T == Pi; half.T = Q R  =>  Pi = R.T R with R.T lower triangular
    _, r = np.linalg.qr(half.T)
    G = r.T
    signs = np.where(np.diag(G) < 0, -1.0, 1.0)
    return G * signs


@dataclass(frozen=True)
class LinearSystem:
    """One model ``x+ = A x + B u + w`` with ``w ~ N(0, Pi)``."""

    A: np.ndarray
    B: np.ndarray
    Pi: np.ndarray
    G: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        Pi = _as_matrix(self.Pi, "Pi")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape[0] != n:
            raise ValueError(f"B must have {n} rows, got {B.shape[0]}")
        if Pi.shape != (n, n):
            raise ValueError(f"Pi must be {n}x{n}")
        scale = max(np.linalg.norm(Pi), 1.0)
        if np.max(np.abs(Pi - Pi.T)) > 1e-12 * scale:
            raise ValueError("Pi must be symmetric")
        Pi = 0.5 * (Pi + Pi.T)
        G = psd_factor(Pi)
        for name, value in (("A", A), ("B", B), ("Pi", Pi), ("G", G)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        return self.A + self.B @ np.asarray(K, dtype=float)


@dataclass(frozen=True)
class Rollout:
    """States ``x[0..T]`` and inputs ``u[0..T]`` stored as rows."""

    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        if len(x) - len(u) not in (0, 1):
            raise ValueError("rollout needs len(x) == len(u) or len(u) + 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("rollout has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    @property
    def horizon(self) -> int:
        return len(self.x) - 1


@dataclass(frozen=True)
class Dataset:
    rollouts: tuple
    n_x: int
    n_u: int

    def __post_init__(self):
        rollouts = tuple(self.rollouts)
        if self.n_x < 1 or self.n_u < 1:
            raise ValueError("n_x and n_u must be positive")
        for r in rollouts:
            if r.x.shape[1] != self.n_x or r.u.shape[1] != self.n_u:
                raise ValueError("rollout dimensions inconsistent with dataset")
        object.__setattr__(self, "rollouts", rollouts)

    def triples(self):
        """Stacked ``(x_prev, u_prev, x_next)`` over all rollouts, one row per transition."""
        xs, us, xn = [], [], []
        for r in self.rollouts:
            T = r.horizon
            if T < 1:
                continue
            xs.append(r.x[:T])
            us.append(r.u[:T])
            xn.append(r.x[1:T + 1])
        if not xs:
            return (np.zeros((0, self.n_x)), np.zeros((0, self.n_u)), np.zeros((0, self.n_x)))
        return np.vstack(xs), np.vstack(us), np.vstack(xn)

    @property
    def n_triples(self) -> int:
        return sum(max(r.horizon, 0) for r in self.rollouts)

    def duplicated(self) -> "Dataset":
        return Dataset(self.rollouts + self.rollouts, self.n_x, self.n_u)


@dataclass(frozen=True)
class GainPolicy:
    K: np.ndarray

    def __post_init__(self):
        K = _as_matrix(self.K, "K")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)


def make_toeplitz_system(n_x: int) -> LinearSystem:
    """Symmetric Toeplitz dynamics with first row (1.01, 0.01, 0, ...), B = Pi = I."""
    if n_x < 1:
        raise ValueError("n_x must be >= 1")
    row = np.zeros(n_x)
    row[0] = 1.01
    if n_x > 1:
        row[1] = 0.01
    return LinearSystem(toeplitz(row, row), np.eye(n_x), np.eye(n_x))


def gaussian_inputs(rng: np.random.Generator, n_u: int) -> np.ndarray:
    return rng.standard_normal(n_u)


def zero_inputs(rng: np.random.Generator, n_u: int) -> np.ndarray:
    return np.zeros(n_u)


def simulate_rollout(system: LinearSystem, T: int, rng: np.random.Generator,
                     input_source: InputSource = gaussian_inputs,
                     x0: Optional[Sequence[float]] = None) -> Rollout:
    """Roll the system forward T steps, storing T+1 states and T+1 inputs.

    Noise is drawn as ``G @ z`` with ``z`` standard normal and inputs come
    from ``input_source(rng, n_u)``; the draw order is (input, noise) per
    step so identical seeds reproduce the rollout exactly.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n, m = system.n_x, system.n_u
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    x = np.empty((T + 1, n))
    u = np.empty((T + 1, m))
    x[0] = x0
    for t in range(T + 1):
        ut = np.asarray(input_source(rng, m), dtype=float)
        if ut.shape != (m,):
            raise ValueError(f"input source returned shape {ut.shape}, expected ({m},)")
        u[t] = ut
        if t < T:
            w = system.G @ rng.standard_normal(n)
            x[t + 1] = system.A @ x[t] + system.B @ ut + w
    return Rollout(x, u)


def simulate_dataset(system: LinearSystem, n_rollouts: int, T: int,
                     rng: np.random.Generator,
                     input_source: InputSource = gaussian_inputs) -> Dataset:
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    rollouts = [simulate_rollout(system, T, rng, input_source) for _ in range(n_rollouts)]
    return Dataset(tuple(rollouts), system.n_x, system.n_u)


def spectral_radius(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def is_schur_stable(M) -> bool:
    return spectral_radius(M) < 1.0


def is_stabilizable(A, B, tol: float = 1e-8, margin: float = 1e-9) -> bool:
    """PBH test: every eigenvalue with ``|lam| >= 1 - margin`` must be controllable.

    ``tol`` is relative; a mode counts as uncontrollable when the smallest
    singular value of ``[A - lam I, B]`` falls below ``tol * ||[A - lam I, B]||``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) < 1.0 - margin:
            continue
        pbh = np.hstack([A - lam * np.eye(n), B])
        s = np.linalg.svd(pbh, compute_uv=False)
        if len(s) < n or s[n - 1] <= tol * max(s[0], np.finfo(float).tiny):
            return False
    return True
