"""Dense semidefinite programs over named matrix variables.

A problem is ``minimize c'x  s.t.  F0_b + sum_j x_j F_jb >= 0`` for every
PSD block ``b``. Blocks are built from :class:`AffineExpr` objects, which
are affine matrix-valued functions of the scalar decision vector.

Solving is delegated to Clarabel (a primal-dual interior-point conic
solver); :func:`solve` then re-evaluates every block and the duality gap
from the returned primal and dual points and only reports ``optimal`` when
both certificates hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

FEAS_TOL = 1e-7
GAP_TOL = 1e-7
MAX_ITERS = 200

_SQRT2 = np.sqrt(2.0)


class SdpError(RuntimeError):
    pass


class AffineExpr:
    """Matrix ``const + sum_k x[idx[k]] * coef[k]``."""

    __slots__ = ("const", "idx", "coef")
    # Make numpy defer to the reflected operators below (``ndarray @ expr``).
    __array_ufunc__ = None

    def __init__(self, const, idx=None, coef=None):
        const = np.atleast_2d(np.asarray(const, dtype=float))
        if idx is None:
            idx = np.zeros(0, dtype=np.int64)
            coef = np.zeros((0,) + const.shape)
        self.const = const
        self.idx = np.asarray(idx, dtype=np.int64)
        self.coef = np.asarray(coef, dtype=float)

    @property
    def shape(self):
        return self.const.shape

    @staticmethod
    def lift(value) -> "AffineExpr":
        if isinstance(value, AffineExpr):
            return value
        if isinstance(value, MatrixVariable):
            return value.expr()
        return AffineExpr(value)

    @property
    def T(self) -> "AffineExpr":
        return AffineExpr(self.const.T, self.idx, np.swapaxes(self.coef, 1, 2))

    def _combine(self, other, sign: float) -> "AffineExpr":
        other = AffineExpr.lift(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        idx = np.union1d(self.idx, other.idx)
        coef = np.zeros((len(idx),) + self.shape)
        coef[np.searchsorted(idx, self.idx)] += self.coef
        coef[np.searchsorted(idx, other.idx)] += sign * other.coef
        return AffineExpr(self.const + sign * other.const, idx, coef)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return AffineExpr.lift(other)._combine(self, -1.0)

    def __neg__(self):
        return AffineExpr(-self.const, self.idx, -self.coef)

    def __mul__(self, alpha):
        if not np.isscalar(alpha):
            raise TypeError("only scalar multiplication is affine; use @ for matrices")
        return AffineExpr(alpha * self.const, self.idx, alpha * self.coef)

    __rmul__ = __mul__

    def __matmul__(self, P):
        if isinstance(P, (AffineExpr, MatrixVariable)):
            raise TypeError("product of two affine expressions is not affine")
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return AffineExpr(self.const @ P, self.idx, self.coef @ P)

    def __rmatmul__(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return AffineExpr(P @ self.const, self.idx, np.matmul(P, self.coef))

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if len(self.idx) == 0:
            return self.const.copy()
        return self.const + np.tensordot(x[self.idx], self.coef, axes=1)

    def trace(self) -> "AffineExpr":
        return AffineExpr([[np.trace(self.const)]], self.idx,
                          np.trace(self.coef, axis1=1, axis2=2).reshape(-1, 1, 1))


def trace_inner(C, expr) -> AffineExpr:
    """``trace(C @ expr)`` as a 1x1 expression."""
    return (np.asarray(C, dtype=float) @ AffineExpr.lift(expr)).trace()


def bmat(rows: Sequence[Sequence]) -> AffineExpr:
    """Block matrix from expressions, constant arrays, or ``None`` (zero)."""
    nr, nc = len(rows), len(rows[0])
    heights = [None] * nr
    widths = [None] * nc
    items = [[None if b is None else AffineExpr.lift(b) for b in row] for row in rows]
    for i, row in enumerate(items):
        if len(row) != nc:
            raise ValueError("ragged block rows")
        for j, b in enumerate(row):
            if b is None:
                continue
            h, w = b.shape
            if heights[i] not in (None, h) or widths[j] not in (None, w):
                raise ValueError(f"inconsistent block size at ({i}, {j})")
            heights[i], widths[j] = h, w
    if None in heights or None in widths:
        raise ValueError("every block row and column needs at least one sized entry")
    r0 = np.concatenate([[0], np.cumsum(heights)])
    c0 = np.concatenate([[0], np.cumsum(widths)])
    present = [b for row in items for b in row if b is not None]
    idx = np.unique(np.concatenate([b.idx for b in present]))
    const = np.zeros((r0[-1], c0[-1]))
    coef = np.zeros((len(idx), r0[-1], c0[-1]))
    for i, row in enumerate(items):
        for j, b in enumerate(row):
            if b is None:
                continue
            rs, cs = slice(r0[i], r0[i + 1]), slice(c0[j], c0[j + 1])
            const[rs, cs] = b.const
            if len(b.idx):
                coef[np.searchsorted(idx, b.idx), rs, cs] = b.coef
    return AffineExpr(const, idx, coef)


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    rows: int
    cols: int
    symmetric: bool
    offset: int

    @property
    def size(self) -> int:
        return self.rows * (self.rows + 1) // 2 if self.symmetric else self.rows * self.cols

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.size)

    def expr(self) -> AffineExpr:
        return AffineExpr(np.zeros((self.rows, self.cols)), self.indices, _basis(self.rows, self.cols, self.symmetric))

    def value(self, x) -> np.ndarray:
        return np.tensordot(np.asarray(x, dtype=float)[self.indices],
                            _basis(self.rows, self.cols, self.symmetric), axes=1)

    def pack(self, M) -> np.ndarray:
        """Scalar values that reproduce ``M`` under :meth:`value`."""
        M = np.asarray(M, dtype=float)
        if self.symmetric:
            i, j = np.triu_indices(self.rows)
            return M[i, j]
        return M.ravel()


@lru_cache(maxsize=None)
def _basis(rows: int, cols: int, symmetric: bool) -> np.ndarray:
    if symmetric:
        i, j = np.triu_indices(rows)
        E = np.zeros((len(i), rows, rows))
        k = np.arange(len(i))
        E[k, i, j] = 1.0
        E[k, j, i] = 1.0
    else:
        E = np.eye(rows * cols).reshape(rows * cols, rows, cols)
    E.setflags(write=False)
    return E


@dataclass
class PsdBlock:
    const: np.ndarray
    idx: np.ndarray
    coef: np.ndarray
    label: str = ""

    @property
    def size(self) -> int:
        return self.const.shape[0]

    def evaluate(self, x) -> np.ndarray:
        return AffineExpr(self.const, self.idx, self.coef).evaluate(x)


class SdpProblem:
    """Linear objective over scalar variables with affine PSD block constraints."""

    def __init__(self):
        self.variables: Dict[str, MatrixVariable] = {}
        self.n_vars = 0
        self.blocks: List[PsdBlock] = []
        self._objective: List[np.ndarray] = []
        self.objective_offset = 0.0

    def _register(self, name, rows, cols, symmetric) -> MatrixVariable:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already registered")
        if rows < 1 or cols < 1:
            raise ValueError("variable dimensions must be positive")
        var = MatrixVariable(name, rows, cols, symmetric, self.n_vars)
        self.variables[name] = var
        self.n_vars += var.size
        self._objective.append(np.zeros(var.size))
        return var

    def register_symmetric_variable(self, name: str, n: int) -> MatrixVariable:
        return self._register(name, n, n, True)

    def register_rectangular_variable(self, name: str, rows: int, cols: int) -> MatrixVariable:
        return self._register(name, rows, cols, False)

    @property
    def objective(self) -> np.ndarray:
        return np.concatenate(self._objective) if self._objective else np.zeros(0)

    def add_objective(self, expr) -> None:
        """Add a 1x1 affine expression to the minimized objective."""
        expr = AffineExpr.lift(expr)
        if expr.shape != (1, 1):
            raise ValueError("objective terms must be 1x1")
        self._check_indices(expr.idx)
        c = self.objective
        np.add.at(c, expr.idx, expr.coef[:, 0, 0])
        self._objective = [c]
        self.objective_offset += float(expr.const[0, 0])

    def _check_indices(self, idx) -> None:
        if len(idx) and (idx.min() < 0 or idx.max() >= self.n_vars):
            raise ValueError("expression references an unregistered variable")

    def add_psd_block(self, expr, label: str = "", sym_tol: float = 1e-12) -> PsdBlock:
        expr = AffineExpr.lift(expr)
        m, m2 = expr.shape
        if m != m2:
            raise ValueError("PSD block must be square")
        self._check_indices(expr.idx)
        scale = 1.0 + max(np.abs(expr.const).max(initial=0.0), np.abs(expr.coef).max(initial=0.0))
        asym = max(np.abs(expr.const - expr.const.T).max(initial=0.0),
                   np.abs(expr.coef - np.swapaxes(expr.coef, 1, 2)).max(initial=0.0))
        if asym > sym_tol * scale:
            raise ValueError(f"PSD block {label!r} is not symmetric (asymmetry {asym:.2e})")
        keep = np.abs(expr.coef).reshape(len(expr.idx), m * m).max(axis=1, initial=0.0) > 0
        block = PsdBlock(0.5 * (expr.const + expr.const.T), expr.idx[keep],
                         0.5 * (expr.coef[keep] + np.swapaxes(expr.coef[keep], 1, 2)), label)
        self.blocks.append(block)
        return block

    def dump(self, path) -> None:
        """Write the problem as sparse text: ``block var row col value``.

        Variable 0 is the constant term, variables ``1..n`` the scalars;
        block, row and column indices are 1-based, upper triangle only.
        """
        c = self.objective
        with open(path, "w") as fh:
            fh.write(f"# n_vars {self.n_vars} n_blocks {len(self.blocks)}\n")
            fh.write("# block_sizes " + " ".join(str(b.size) for b in self.blocks) + "\n")
            fh.write("# objective " + " ".join(repr(float(v)) for v in c) + "\n")
            for bi, block in enumerate(self.blocks, start=1):
                mats = [(0, block.const)] + [(int(j) + 1, F) for j, F in zip(block.idx, block.coef)]
                for vj, F in mats:
                    r, s = np.nonzero(np.triu(F))
                    for i, j in zip(r, s):
                        fh.write(f"{bi} {vj} {i + 1} {j + 1} {float(F[i, j])!r}\n")


@dataclass
class SdpSolution:
    x: np.ndarray
    objective_value: float
    status: str
    primal_residual: float
    gap: float
    dual_objective: float = float("nan")
    dual_residual: float = float("nan")
    duals: List[np.ndarray] = field(default_factory=list, repr=False)
    iterations: int = 0
    solver_status: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# Observers receive (problem, solution) after every solve; used for post-hoc auditing.
SOLVE_OBSERVERS: List[Callable[[SdpProblem, SdpSolution], None]] = []


@lru_cache(maxsize=None)
def _svec_pattern(m: int):
    # Clarabel's PSD triangle cone: upper triangle, column-major, off-diagonals scaled by sqrt(2).
    cols, rows = [], []
    for j in range(m):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    rows, cols = np.array(rows), np.array(cols)
    weight = np.where(rows == cols, 1.0, _SQRT2)
    return rows, cols, weight


def _svec(F: np.ndarray) -> np.ndarray:
    rows, cols, weight = _svec_pattern(F.shape[-1])
    return F[..., rows, cols] * weight


def _smat(v: np.ndarray, m: int) -> np.ndarray:
    rows, cols, weight = _svec_pattern(m)
    S = np.zeros((m, m))
    S[rows, cols] = v / weight
    S[cols, rows] = v / weight
    return S


def block_certificates(problem: SdpProblem, x: np.ndarray):
    """Relative primal residual ``max_b max(0, -lam_min(F_b) / (1 + ||F_b||))``."""
    worst = 0.0
    for block in problem.blocks:
        F = block.evaluate(x)
        lam = np.linalg.eigvalsh(F)
        norm = max(abs(lam[0]), abs(lam[-1]))
        worst = max(worst, -lam[0] / (1.0 + norm))
    return worst


def relative_gap(primal: float, dual: float) -> float:
    return abs(primal - dual) / (1.0 + abs(primal))


# Tried in order until the certificates hold; each is deterministic.
_FALLBACK_SETTINGS = (
    {},
    {"equilibrate_enable": False},
    {"static_regularization_constant": 1e-10, "iterative_refinement_reltol": 1e-14,
     "iterative_refinement_abstol": 1e-14, "iterative_refinement_max_iter": 50},
)


def _clarabel_attempt(problem, c, A, b, cones, feas_tol, gap_tol, max_iters, overrides):
    import clarabel

    n = len(c)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iters
    settings.tol_gap_abs = min(1e-9, 0.01 * gap_tol)
    settings.tol_gap_rel = min(1e-9, 0.01 * gap_tol)
    settings.tol_feas = min(1e-9, 0.01 * feas_tol)
    settings.tol_ktratio = 1e-8
    for key, value in overrides.items():
        setattr(settings, key, value)
    result = clarabel.DefaultSolver(sp.csc_matrix((n, n)), c, A, b, cones, settings).solve()
    status_name = str(result.status)
    iters = int(result.iterations)

    x = np.asarray(result.x, dtype=float)
    z = np.asarray(result.z, dtype=float)
    if "Infeasible" in status_name and "Dual" not in status_name:
        return SdpSolution(x, float("inf"), "infeasible", float("inf"), float("inf"),
                           iterations=iters, solver_status=status_name)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        return SdpSolution(x, float("nan"), "numerical_failure", float("inf"), float("inf"),
                           iterations=iters, solver_status=status_name)
    duals, start = [], 0
    for block in problem.blocks:
        L = block.size * (block.size + 1) // 2
        duals.append(_smat(z[start:start + L], block.size))
        start += L
    primal = float(c @ x) + problem.objective_offset
    dual = -sum(float(np.sum(block.const * Z)) for block, Z in zip(problem.blocks, duals)) \
        + problem.objective_offset
    # Dual feasibility: trace(F_j Z) summed over blocks must reproduce c_j.
    grad = np.zeros(n)
    for block, Z in zip(problem.blocks, duals):
        if len(block.idx):
            np.add.at(grad, block.idx, np.einsum("kij,ij->k", block.coef, Z))
    dual_res = float(np.max(np.abs(grad - c), initial=0.0) / (1.0 + np.max(np.abs(c), initial=0.0)))
    residual = block_certificates(problem, x)
    gap = relative_gap(primal, dual)
    ok = (status_name in ("Solved", "AlmostSolved") and residual <= feas_tol
          and gap <= gap_tol and dual_res <= feas_tol)
    return SdpSolution(x, primal, "optimal" if ok else "numerical_failure", residual, gap,
                       dual, dual_res, duals, iters, status_name)


def solve(problem: SdpProblem, feas_tol: float = FEAS_TOL, gap_tol: float = GAP_TOL,
          max_iters: int = MAX_ITERS) -> SdpSolution:
    import clarabel

    n = problem.n_vars
    if n < 1:
        raise ValueError("SDP has no decision variables")
    c = problem.objective
    if len(c) != n:
        raise ValueError("objective length does not match variable count")

    rows, cols, vals, b_parts, cones = [], [], [], [], []
    offset = 0
    for block in problem.blocks:
        m = block.size
        L = m * (m + 1) // 2
        b_parts.append(_svec(block.const))
        if len(block.idx):
            S = -_svec(block.coef)  # (k, L)
            kk, ll = np.nonzero(S)
            rows.append(offset + ll)
            cols.append(block.idx[kk])
            vals.append(S[kk, ll])
        cones.append(clarabel.PSDTriangleConeT(m))
        offset += L
    A = sp.csc_matrix((np.concatenate(vals) if vals else np.zeros(0),
                       (np.concatenate(rows) if rows else np.zeros(0, int),
                        np.concatenate(cols) if cols else np.zeros(0, int))),
                      shape=(offset, n))
    b = np.concatenate(b_parts) if b_parts else np.zeros(0)

    sol = None
    for overrides in _FALLBACK_SETTINGS:
        sol = _clarabel_attempt(problem, c, A, b, cones, feas_tol, gap_tol, max_iters, overrides)
        if sol.status in ("optimal", "infeasible"):
            break
        log.debug("SDP not certified with %s: solver=%s residual=%.2e gap=%.2e dual_res=%.2e",
                  overrides or "defaults", sol.solver_status, sol.primal_residual, sol.gap,
                  sol.dual_residual)
    for observer in SOLVE_OBSERVERS:
        observer(problem, sol)
    return sol
