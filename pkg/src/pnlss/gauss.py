"""Gaussian densities and kernel-weighted Gaussian integrals.

A ridge kernel ``exp(-(w.x - wt)**2 / 2)`` multiplied into ``N(x; mu, Sigma)``
gives an unnormalised Gaussian whose precision is ``Sigma^-1 + w w^T``.  The
functions here evaluate that tilt with Sherman-Morrison and the matrix
determinant lemma, so no ``D x D`` inverse is ever formed on the ridge path.
All normalisers are kept in the log domain until the final ``exp``.
"""
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalError

JITTER_START = 1e-10
JITTER_MAX = 1e-6


def symmetrize(S):
    return 0.5 * (S + S.T)


def safe_cholesky(S, name="covariance"):
    """Lower Cholesky factor of ``S``, adding ``eps * I`` if needed.

    ``eps`` starts at 1e-10 and doubles up to 1e-6; beyond that the matrix is
    declared indefinite.
    """
    S = np.asarray(S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise NumericalError(f"{name} has non-finite entries")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(S.shape[0])
    eps = JITTER_START
    while eps <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(S + eps * eye)
        except np.linalg.LinAlgError:
            eps *= 2.0
    raise NumericalError(f"{name} is not positive definite (jitter up to {JITTER_MAX:g} failed)")


def chol_solve(L, B):
    return scipy.linalg.cho_solve((L, True), B, check_finite=False)


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    """Multivariate normal ``N(mean, covariance)``; immutable."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mean, dtype=float).reshape(-1)
        S = np.array(self.covariance, dtype=float).reshape(mu.size, mu.size)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(S))):
            raise InvalidInputError("Gaussian density has non-finite mean or covariance")
        scale = np.max(np.abs(S)) if S.size else 0.0
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * scale:
            raise InvalidInputError("covariance is not symmetric")
        mu.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", S)

    @property
    def dim(self):
        return self.mean.size

    @cached_property
    def chol(self):
        return safe_cholesky(self.covariance)

    @cached_property
    def precision(self):
        return chol_solve(self.chol, np.eye(self.dim))

    @cached_property
    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def second_moment(self):
        return self.covariance + np.outer(self.mean, self.mean)

    def log_pdf(self, x):
        x = np.atleast_2d(x)
        r = scipy.linalg.solve_triangular(self.chol, (x - self.mean).T, lower=True)
        return -0.5 * (self.dim * np.log(2 * np.pi) + self.logdet + np.sum(r ** 2, axis=0))

    def sample(self, rng, n):
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T


class RankOneUpdateResult(NamedTuple):
    updated_covariance: np.ndarray
    updated_mean: np.ndarray
    log_normalizer: float
    log_det_ratio: float  # log |Sigma_phi| - log |Sigma|


def _check_kernel(p, w, w_tilde):
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != p.dim:
        raise InvalidInputError(f"projection vector has length {w.size}, density has dimension {p.dim}")
    if not (np.all(np.isfinite(w)) and np.isfinite(w_tilde)):
        raise InvalidInputError("kernel parameters must be finite")
    return w, float(w_tilde)


def _tilt(mu, S, w, w_tilde):
    Sw = S @ w
    denom = 1.0 + w @ Sw
    if not denom > 0.0:
        raise NumericalError("rank-one tilt denominator 1 + w'Sw is not positive")
    u = w @ mu - w_tilde
    S_phi = symmetrize(S - np.outer(Sw, Sw) / denom)
    mu_phi = mu - Sw * (u / denom)
    log_norm = -0.5 * np.log(denom) - 0.5 * u * u / denom
    return RankOneUpdateResult(S_phi, mu_phi, float(log_norm), float(-np.log(denom)))


def rank_one_tilt(p, w, w_tilde):
    """Tilt ``p`` by the ridge kernel ``exp(-(w.x - w_tilde)**2 / 2)``.

    ``kernel(x) * p(x) == exp(log_normalizer) * N(x; updated_mean, updated_covariance)``.
    """
    w, w_tilde = _check_kernel(p, w, w_tilde)
    return _tilt(p.mean, p.covariance, w, w_tilde)


def _pair_tilt(p, w_l, w_tilde_l, w_m, w_tilde_m):
    w_l, w_tilde_l = _check_kernel(p, w_l, w_tilde_l)
    w_m, w_tilde_m = _check_kernel(p, w_m, w_tilde_m)
    first = _tilt(p.mean, p.covariance, w_l, w_tilde_l)
    second = _tilt(first.updated_mean, first.updated_covariance, w_m, w_tilde_m)
    return RankOneUpdateResult(second.updated_covariance, second.updated_mean,
                               first.log_normalizer + second.log_normalizer,
                               first.log_det_ratio + second.log_det_ratio)


def expect_kernel(p, w, w_tilde):
    """``E_p[exp(-(w.x - w_tilde)**2 / 2)]``."""
    return float(np.exp(rank_one_tilt(p, w, w_tilde).log_normalizer))


def expect_x_kernel(p, w, w_tilde):
    """``E_p[x exp(-(w.x - w_tilde)**2 / 2)]``."""
    r = rank_one_tilt(p, w, w_tilde)
    return r.updated_mean * np.exp(r.log_normalizer)


def expect_x_x_kernel(p, w, w_tilde):
    """``E_p[x x^T exp(-(w.x - w_tilde)**2 / 2)]``."""
    r = rank_one_tilt(p, w, w_tilde)
    return (r.updated_covariance + np.outer(r.updated_mean, r.updated_mean)) * np.exp(r.log_normalizer)


def expect_kernel_pair(p, w_l, w_tilde_l, w_m, w_tilde_m):
    """``E_p[phi_l(x) phi_m(x)]`` via two successive rank-one tilts."""
    return float(np.exp(_pair_tilt(p, w_l, w_tilde_l, w_m, w_tilde_m).log_normalizer))


def expect_x_kernel_pair(p, w_l, w_tilde_l, w_m, w_tilde_m):
    """``E_p[x phi_l(x) phi_m(x)]``."""
    r = _pair_tilt(p, w_l, w_tilde_l, w_m, w_tilde_m)
    return r.updated_mean * np.exp(r.log_normalizer)


def dense_tilt(p, precision_update, linear_term, kappa=0.0):
    """Tilt ``p`` by ``exp(-x'Λx/2 + η'x - κ)`` with a full-rank ``Λ``.

    The general route: forms ``(Sigma^-1 + Λ)^-1`` densely.  Used by the RBF
    kernels, where no low-rank structure is available.
    """
    Lam = np.asarray(precision_update, dtype=float)
    eta = np.asarray(linear_term, dtype=float)
    P_inv = p.precision
    new_prec = symmetrize(P_inv + Lam)
    Lc = safe_cholesky(new_prec, "tilted precision")
    h = eta + P_inv @ p.mean
    mu_phi = chol_solve(Lc, h)
    S_phi = symmetrize(chol_solve(Lc, np.eye(p.dim)))
    logdet_phi = -2.0 * np.sum(np.log(np.diag(Lc)))
    log_norm = (0.5 * (logdet_phi - p.logdet) + 0.5 * h @ mu_phi
                - 0.5 * p.mean @ P_inv @ p.mean - kappa)
    return RankOneUpdateResult(S_phi, mu_phi, float(log_norm), float(logdet_phi - p.logdet))
