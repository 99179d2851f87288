"""Posterior inference over ``theta = (A, B, Pi)`` and confidence-region sampling.

Parameters of ``(A, B)`` are stacked as ``theta_AB = vec([A'; B'])``, i.e.
the rows of ``[A B]`` concatenated. The regressor for one transition is
``z = [x_prev; u_prev]``, so ``x_next = [A B] z + w``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import Dataset, LinearSystem, is_stabilizable

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class InsufficientExcitationError(ValueError):
    pass


class ImproperPosteriorError(ValueError):
    pass


class InsufficientSamplesError(RuntimeError):
    def __init__(self, message, survivors: int, requested: int):
        super().__init__(message)
        self.survivors = survivors
        self.requested = requested


class GibbsError(RuntimeError):
    pass


@dataclass
class PosteriorSpec:
    """Prior and noise assumptions.

    ``known_pi`` fixes the noise covariance; otherwise it is sampled under
    ``pi_prior`` (``"jeffreys"`` or ``"none"``). ``prior_mean`` and
    ``prior_cov`` give a Gaussian prior on ``theta_AB``; leave both ``None``
    for the flat prior.
    """

    known_pi: Optional[np.ndarray] = None
    prior_mean: Optional[np.ndarray] = None
    prior_cov: Optional[np.ndarray] = None
    pi_prior: str = "jeffreys"

    def __post_init__(self):
        if self.known_pi is not None:
            self.known_pi = np.atleast_2d(np.asarray(self.known_pi, dtype=float))
            _require_spd(self.known_pi, "known_pi")
        if (self.prior_mean is None) != (self.prior_cov is None):
            raise ValueError("Gaussian prior needs both mean and covariance")
        if self.prior_cov is not None:
            self.prior_mean = np.asarray(self.prior_mean, dtype=float).ravel()
            self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
            _require_spd(self.prior_cov, "prior_cov")
        if self.pi_prior not in ("jeffreys", "none"):
            raise ValueError("pi_prior must be 'jeffreys' or 'none'")

    @property
    def flat(self) -> bool:
        return self.prior_cov is None


def _require_spd(M, name):
    if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    Sigma: np.ndarray
    n_x: int
    n_u: int

    def mean_system(self, Pi) -> LinearSystem:
        A, B = theta_to_ab(self.mu, self.n_x, self.n_u)
        return LinearSystem(A, B, Pi)

    def sample_ab(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws of ``[A B]`` with shape ``(n, n_x, n_x + n_u)``."""
        L = np.linalg.cholesky(self.Sigma)
        z = rng.standard_normal((n, len(self.mu)))
        thetas = self.mu + z @ L.T
        return thetas.reshape(n, self.n_x, self.n_x + self.n_u)


def theta_to_ab(theta, n_x: int, n_u: int):
    W = np.asarray(theta, dtype=float).reshape(n_x, n_x + n_u)
    return W[:, :n_x].copy(), W[:, n_x:].copy()


def ab_to_theta(A, B) -> np.ndarray:
    return np.hstack([np.atleast_2d(A), np.atleast_2d(B)]).ravel()


def _regressors(data: Dataset):
    xp, up, xn = data.triples()
    return np.hstack([xp, up]), xn


def least_squares_estimate(data: Dataset, rtol: float = 1e-10):
    """``argmin sum |x_t - A x_{t-1} - B u_{t-1}|^2`` over all rollouts."""
    Z, Y = _regressors(data)
    p = data.n_x + data.n_u
    s = np.linalg.svd(Z, compute_uv=False) if len(Z) else np.zeros(0)
    if len(s) < p or s[-1] <= rtol * max(s[0], np.finfo(float).tiny):
        raise InsufficientExcitationError(
            f"insufficient excitation: regressor rank below {p} with {len(Z)} transitions")
    W, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    AB = W.T
    return AB[:, :data.n_x], AB[:, data.n_x:]


def posterior_gaussian_known_pi(data: Dataset, Pi, prior: Optional[PosteriorSpec] = None) -> GaussianPosterior:
    """Exact Gaussian posterior on ``theta_AB`` for fixed noise covariance ``Pi``.

    The likelihood information is ``sum_i D_i' Pi^-1 D_i = Pi^-1 kron Z'Z`` with
    ``D_i = I kron z_i'``; a Gaussian prior adds its precision.
    """
    prior = prior or PosteriorSpec()
    Pi = np.atleast_2d(np.asarray(Pi, dtype=float))
    n, m = data.n_x, data.n_u
    Z, Y = _regressors(data)
    Pi_inv = np.linalg.inv(Pi)
    info = np.kron(Pi_inv, Z.T @ Z)
    h = (Pi_inv @ Y.T @ Z).ravel()
    if not prior.flat:
        P0_inv = np.linalg.inv(prior.prior_cov)
        info = info + P0_inv
        h = h + P0_inv @ prior.prior_mean
    info = 0.5 * (info + info.T)
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise ImproperPosteriorError("information matrix is singular: improper posterior") from None
    if np.min(np.diag(chol)) <= 1e-10 * np.max(np.diag(chol)):
        raise ImproperPosteriorError("information matrix is numerically singular: improper posterior")
    eye = np.eye(len(h))
    chol_inv = np.linalg.solve(chol, eye)
    Sigma = chol_inv.T @ chol_inv
    Sigma = 0.5 * (Sigma + Sigma.T)
    mu = Sigma @ h
    return GaussianPosterior(mu, Sigma, n, m)


def residual_scatter(data: Dataset, A, B) -> np.ndarray:
    """``Phi = sum_i r_i r_i'`` with ``r_i = x_+ - A x_- - B u``."""
    xp, up, xn = data.triples()
    R = xn - xp @ np.atleast_2d(A).T - up @ np.atleast_2d(B).T
    return R.T @ R


def _log_prior_ab(theta_ab, spec: PosteriorSpec):
    if spec.flat:
        return 0.0
    d = theta_ab - spec.prior_mean
    sign, logdet = np.linalg.slogdet(spec.prior_cov)
    return -0.5 * (d @ np.linalg.solve(spec.prior_cov, d) + len(d) * LOG_2PI + logdet)


def log_unnormalized_posterior(theta: LinearSystem, data: Dataset, spec: PosteriorSpec) -> float:
    """``log p(theta) + sum log N(x_t; A x_{t-1} + B u_{t-1}, Pi)``."""
    Pi = theta.Pi
    sign, logdet = np.linalg.slogdet(Pi)
    if sign <= 0:
        raise ValueError("Pi must be positive definite")
    xp, up, xn = data.triples()
    R = xn - xp @ theta.A.T - up @ theta.B.T
    quad = np.sum(R * np.linalg.solve(Pi, R.T).T)
    N = len(R)
    loglik = -0.5 * (quad + N * (data.n_x * LOG_2PI + logdet))
    logp = _log_prior_ab(ab_to_theta(theta.A, theta.B), spec)
    if spec.known_pi is None and spec.pi_prior == "jeffreys":
        logp += -0.5 * (data.n_x + 1) * logdet
    return float(loglik + logp)


def _batch_log_posterior(W: np.ndarray, Pis: np.ndarray, data: Dataset, spec: PosteriorSpec,
                         chunk: int = 512) -> np.ndarray:
    """Vectorised :func:`log_unnormalized_posterior` over stacks of ``[A B]`` and ``Pi``."""
    Z, Y = _regressors(data)
    N, n = Y.shape
    out = np.empty(len(W))
    Pi_inv = np.linalg.inv(Pis)
    _, logdets = np.linalg.slogdet(Pis)
    for s in range(0, len(W), chunk):
        sl = slice(s, s + chunk)
        R = Y[None] - np.einsum("pij,tj->pti", W[sl], Z)
        quad = np.einsum("pti,pij,ptj->p", R, Pi_inv[sl], R)
        out[sl] = -0.5 * (quad + N * (n * LOG_2PI + logdets[sl]))
    if not spec.flat:
        out += np.array([_log_prior_ab(w.ravel(), spec) for w in W])
    if spec.known_pi is None and spec.pi_prior == "jeffreys":
        out += -0.5 * (n + 1) * logdets
    return out


def sample_inverse_wishart(Phi: np.ndarray, nu: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``Pi ~ IW(Phi, nu)`` as the inverse of a Bartlett-sampled ``W(Phi^-1, nu)``."""
    n = Phi.shape[0]
    if nu <= n - 1:
        raise GibbsError(f"inverse-Wishart degrees of freedom {nu} must exceed {n - 1}")
    try:
        C = np.linalg.cholesky(np.linalg.inv(Phi))
    except np.linalg.LinAlgError:
        raise GibbsError("residual scatter matrix is singular; cannot sample noise covariance") from None
    T = np.zeros((n, n))
    T[np.diag_indices(n)] = np.sqrt(rng.chisquare(nu - np.arange(n)))
    low = np.tril_indices(n, -1)
    T[low] = rng.standard_normal(len(low[0]))
    CT = C @ T
    Pi = np.linalg.inv(CT @ CT.T)
    return 0.5 * (Pi + Pi.T)


def gibbs_degrees_of_freedom(n_triples: int, n_x: int, pi_prior: str) -> float:
    return float(n_triples) if pi_prior == "jeffreys" else float(n_triples - n_x - 1)


def gibbs_chain(data: Dataset, spec: PosteriorSpec, iterations: int, rng: np.random.Generator,
                burn_in: int = 1000, thin: int = 10, init_pi=None) -> List[LinearSystem]:
    """Gibbs sampler alternating ``(A, B) | Pi`` and ``Pi | (A, B)``.

    Runs ``burn_in + iterations`` sweeps and keeps every ``thin``-th
    post-burn-in draw. The chain starts from ``init_pi`` (identity by default).
    """
    if spec.known_pi is not None:
        raise ValueError("Gibbs sampling needs an unknown noise covariance")
    N = data.n_triples
    if N <= 0:
        raise ValueError("dataset has no transitions")
    if iterations < 1 or thin < 1 or burn_in < 0:
        raise ValueError("iterations and thin must be positive, burn_in non-negative")
    nu = gibbs_degrees_of_freedom(N, data.n_x, spec.pi_prior)
    if nu <= data.n_x - 1:
        raise GibbsError(f"degrees of freedom nu={nu} invalid for n_x={data.n_x}")
    Pi = np.eye(data.n_x) if init_pi is None else np.atleast_2d(np.asarray(init_pi, dtype=float))
    draws = []
    for k in range(burn_in + iterations):
        post = posterior_gaussian_known_pi(data, Pi, spec)
        (AB,) = post.sample_ab(1, rng)
        A, B = AB[:, :data.n_x], AB[:, data.n_x:]
        Pi = sample_inverse_wishart(residual_scatter(data, A, B), nu, rng)
        if k >= burn_in and (k - burn_in) % thin == thin - 1:
            draws.append(LinearSystem(A, B, Pi))
    return draws


@dataclass
class SampleSet:
    samples: List[LinearSystem]
    confidence: float
    log_weights: np.ndarray
    cutoff: float = -math.inf
    pool_size: int = 0
    weight_discards: int = 0
    unstabilizable_discards: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def weight_discard_count(pool_size: int, confidence: float) -> int:
    """``ceil((100 - c)% of pool_size)``, robust to float round-off."""
    return int(math.ceil((100.0 - confidence) * pool_size / 100.0 - 1e-9))


@dataclass
class ConfidenceRegionSampler:
    """Draws stabilizable models from the top-``confidence``% posterior region.

    A pool of posterior draws is ranked by unnormalized posterior; the
    lowest ``(100 - c)%`` are discarded, then unstabilizable models, and the
    first ``M`` survivors (in draw order) are returned.
    """

    data: Dataset
    spec: PosteriorSpec
    confidence: float = 95.0
    pool_factor: int = 20
    burn_in: int = 1000
    thin: int = 10
    _posterior: Optional[GaussianPosterior] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.confidence <= 100.0:
            raise ValueError("confidence must lie in (0, 100]")

    def _pool(self, pool_size: int, rng):
        n, m = self.data.n_x, self.data.n_u
        if self.spec.known_pi is not None:
            if self._posterior is None:
                self._posterior = posterior_gaussian_known_pi(self.data, self.spec.known_pi, self.spec)
            W = self._posterior.sample_ab(pool_size, rng)
            Pis = np.broadcast_to(self.spec.known_pi, (pool_size, n, n))
        else:
            chain = gibbs_chain(self.data, self.spec, pool_size * self.thin, rng,
                                burn_in=self.burn_in, thin=self.thin)
            W = np.stack([np.hstack([s.A, s.B]) for s in chain])
            Pis = np.stack([s.Pi for s in chain])
        return W, Pis

    def __call__(self, M: int, rng: np.random.Generator, pool_size: Optional[int] = None) -> SampleSet:
        if M < 1:
            raise ValueError("M must be positive")
        pool_size = pool_size or self.pool_factor * M
        n = self.data.n_x
        W, Pis = self._pool(pool_size, rng)
        logw = _batch_log_posterior(W, np.ascontiguousarray(Pis), self.data, self.spec)
        n_cut = weight_discard_count(pool_size, self.confidence)
        order = np.argsort(logw, kind="stable")
        keep = np.ones(pool_size, dtype=bool)
        keep[order[:n_cut]] = False
        cutoff = float(logw[keep].min()) if keep.any() else math.inf
        samples, weights, unstab = [], [], 0
        for i in np.flatnonzero(keep):
            A, B = W[i, :, :n], W[i, :, n:]
            if not is_stabilizable(A, B):
                unstab += 1
                continue
            if len(samples) < M:
                samples.append(LinearSystem(A, B, Pis[i]))
                weights.append(logw[i])
        log.info("pool=%d weight_discards=%d unstabilizable_discards=%d survivors=%d",
                 pool_size, n_cut, unstab, int(keep.sum()) - unstab)
        if len(samples) < M:
            raise InsufficientSamplesError(
                f"insufficient stabilizable samples: {len(samples)} survivors for M={M}",
                len(samples), M)
        return SampleSet(samples, self.confidence, np.array(weights), cutoff,
                         pool_size, n_cut, unstab)


def sample_confidence_region(data: Dataset, spec: PosteriorSpec, c: float, M: int,
                             rng: np.random.Generator, pool_size: Optional[int] = None,
                             burn_in: int = 1000, thin: int = 10) -> SampleSet:
    sampler = ConfidenceRegionSampler(data, spec, c, burn_in=burn_in, thin=thin)
    return sampler(M, rng, pool_size)
