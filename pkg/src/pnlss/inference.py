"""Moment-matching filter and smoother.

The forward pass propagates the Gaussian filter density through the kernel
transition by matching the first two moments of ``A phi(x) + b + xi``; the
observation update is an ordinary Kalman update.  The backward pass
moment-matches the joint ``p(x_t, x_{t+1} | y_{1:t})`` and conditions on the
smoothed ``x_{t+1}``.  With no kernels (or ``A_nl = 0``) every step is exact
and the recursions reduce to the Kalman filter and RTS smoother.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalError
from .gauss import GaussianDensity, chol_solve, safe_cholesky, symmetrize

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PosteriorTrajectory:
    """Per-timestep moments, indexed ``0..T`` (index 0 is the initial state).

    ``pred_*[0]`` and ``filt_*[0]`` hold the initial density.  ``cross_cov[t]``
    is ``Cov(x_t, x_{t+1} | y_{1:T})`` and ``forward_cross[t]`` is
    ``Cov(x_{t+1}, x_t | y_{1:t})`` for ``t = 0..T-1``.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    smooth_mean: np.ndarray
    smooth_cov: np.ndarray
    cross_cov: np.ndarray
    forward_cross: np.ndarray
    log_evidence: np.ndarray

    @property
    def T(self):
        return self.log_evidence.size

    @property
    def log_marginal_likelihood(self):
        return float(np.sum(self.log_evidence))

    def prediction_density(self, t):
        return GaussianDensity(self.pred_mean[t], self.pred_cov[t])

    def filter_density(self, t):
        return GaussianDensity(self.filt_mean[t], self.filt_cov[t])

    def smoothing_density(self, t):
        return GaussianDensity(self.smooth_mean[t], self.smooth_cov[t])


def feature_covariances(fm, mus, Sigmas):
    """``E[phi]``, ``Cov(phi)`` and ``Cov(phi, x)`` for a batch of Gaussians.

    The linear block of ``Cov(phi)`` is taken as ``Sigma`` directly rather
    than ``E[xx^T] - mu mu^T``, which loses precision for large means.
    """
    Ephi, Eouter, _ = fm.moments(mus, Sigmas)
    D = fm.dim
    cov = Eouter - Ephi[:, :, None] * Ephi[:, None, :]
    cov[:, :D, :D] = Sigmas
    return Ephi, cov, cov[:, :, :D]


def _predict(params, mu, S):
    Ephi, cov, cov_phi_x = feature_covariances(params.feature_map, mu[None], S[None])
    A = params.A
    mu_p = A @ Ephi[0] + params.b
    S_p = symmetrize(params.Sigma_x + A @ cov[0] @ A.T)
    cross = A @ cov_phi_x[0]
    return mu_p, S_p, cross


def _update(params, mu_p, S_p, y):
    C = params.C
    r = y - C @ mu_p - params.d
    CS = C @ S_p
    S_inn = symmetrize(CS @ C.T + params.Sigma_y)
    L = safe_cholesky(S_inn, "innovation covariance")
    K = chol_solve(L, CS).T
    ImKC = np.eye(mu_p.size) - K @ C
    # Joseph form: same value as S_p - K S_inn K^T, stays PSD in floating point
    S_f = symmetrize(ImKC @ S_p @ ImKC.T + K @ params.Sigma_y @ K.T)
    mu_f = mu_p + K @ r
    z = scipy.linalg.solve_triangular(L, r, lower=True, check_finite=False)
    loglik = -0.5 * (y.size * _LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + z @ z)
    return mu_f, S_f, float(loglik)


def _smooth(mu_f, S_f, mu_p, S_p, mu_s, S_s, cross):
    """``cross`` is ``Cov(x_{t+1}, x_t)`` under the forward joint."""
    L = safe_cholesky(S_p, "prediction covariance")
    J = chol_solve(L, cross).T
    mu = mu_f + J @ (mu_s - mu_p)
    S = symmetrize(S_f + J @ (S_s - S_p) @ J.T)
    return mu, S, J @ S_s


def predict_step(params, filter_prev):
    """Moment-matched prediction density from the previous filter density."""
    mu_p, S_p, _ = _predict(params, filter_prev.mean, filter_prev.covariance)
    safe_cholesky(S_p, "prediction covariance")
    return GaussianDensity(mu_p, S_p)


def filter_step(params, prediction, y_t):
    """Kalman update; returns the filter density and ``log p(y_t | y_{1:t-1})``."""
    y_t = np.asarray(y_t, dtype=float).reshape(-1)
    mu_f, S_f, ll = _update(params, prediction.mean, prediction.covariance, y_t)
    return GaussianDensity(mu_f, S_f), ll


def smooth_step(params, filter_t, prediction_next, smoothing_next):
    """Backward step; returns the smoothing density at ``t`` and ``Cov(x_t, x_{t+1} | y)``."""
    _, _, cross = _predict(params, filter_t.mean, filter_t.covariance)
    mu, S, lag_one = _smooth(filter_t.mean, filter_t.covariance, prediction_next.mean,
                             prediction_next.covariance, smoothing_next.mean,
                             smoothing_next.covariance, cross)
    return GaussianDensity(mu, S), lag_one


def run_inference(params, observations, smooth=True):
    """Forward filter from ``N(mu0, Sigma0)`` then backward smoother."""
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    if Y.ndim != 2 or Y.shape[1] != params.obs_dim:
        raise InvalidInputError(f"observations must have shape (T, {params.obs_dim}), got {Y.shape}")
    if Y.shape[0] < 1:
        raise InvalidInputError("need at least one observation")
    if not np.all(np.isfinite(Y)):
        raise InvalidInputError("observations must be finite")
    T, D = Y.shape[0], params.latent_dim
    pm = np.empty((T + 1, D))
    pc = np.empty((T + 1, D, D))
    fm = np.empty((T + 1, D))
    fc = np.empty((T + 1, D, D))
    fwd_cross = np.empty((T, D, D))
    ll = np.empty(T)
    pm[0] = fm[0] = params.mu0
    pc[0] = fc[0] = params.Sigma0
    for t in range(1, T + 1):
        try:
            pm[t], pc[t], fwd_cross[t - 1] = _predict(params, fm[t - 1], fc[t - 1])
            fm[t], fc[t], ll[t - 1] = _update(params, pm[t], pc[t], Y[t - 1])
        except NumericalError as exc:
            raise NumericalError(f"forward pass failed: {exc}", timestep=t) from None
        if not np.isfinite(ll[t - 1]):
            raise NumericalError("non-finite log evidence", timestep=t)
    sm = fm.copy()
    sc = fc.copy()
    cross = np.zeros((T, D, D))
    if smooth:
        for t in range(T - 1, -1, -1):
            try:
                sm[t], sc[t], cross[t] = _smooth(fm[t], fc[t], pm[t + 1], pc[t + 1],
                                                 sm[t + 1], sc[t + 1], fwd_cross[t])
            except NumericalError as exc:
                raise NumericalError(f"backward pass failed: {exc}", timestep=t) from None
            if np.trace(sc[t]) > np.trace(fc[t]) + 1e-6 and params.n_kernels:
                log.debug("smoothing variance exceeds filter variance at t=%d", t)
    return PosteriorTrajectory(pm, pc, fm, fc, sm, sc, cross, fwd_cross, ll)
