"""EM learning of the PNL-SS parameters.

The E-step is :func:`pnlss.inference.run_inference`.  The M-step solves the
linear parameters in closed form and improves the kernel parameters with
L-BFGS-B on the transition part of the expected complete-data
log-likelihood, using analytic gradients.
"""
import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.optimize

from . import _kernels
from .errors import InvalidInputError, NumericalError
from .features import RBF, RIDGE, FeatureMap
from .gauss import safe_cholesky, symmetrize
from .inference import run_inference
from .model import ModelParams

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)
GRAM_RIDGE = 1e-8
COV_FLOOR = 1e-10

CONVERGED = "converged"
MAX_ITERATIONS = "max_iterations"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class EmConfig:
    max_iterations: int = 100
    convergence_ratio: float = 1e-4
    kernel_opt_max_steps: int = 50
    kernel_opt_gradient_tolerance: float = 1e-5
    seed: int = 0
    learn_kernels: bool = True
    pilot_iterations: int = 5

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise InvalidInputError("max_iterations must be at least 1")
        if not self.convergence_ratio > 0:
            raise InvalidInputError("convergence_ratio must be positive")
        if int(self.kernel_opt_max_steps) < 0 or int(self.pilot_iterations) < 0:
            raise InvalidInputError("step counts must be non-negative")
        if not self.kernel_opt_gradient_tolerance > 0:
            raise InvalidInputError("kernel_opt_gradient_tolerance must be positive")


@dataclass
class EmTrace:
    log_ml: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    termination: str = ""
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.log_ml)

    def append(self, ll, sec):
        self.log_ml.append(float(ll))
        self.seconds.append(float(sec))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "log_ml", "seconds"])
            for i, (ll, sec) in enumerate(zip(self.log_ml, self.seconds)):
                w.writerow([i, repr(ll), repr(sec)])


class TransitionStats(NamedTuple):
    """Sums over ``t = 1..T`` of the expected transition statistics.

    ``phi_aug`` is ``phi`` with a trailing constant 1, so ``S_pp`` is
    (M+1, M+1) and ``S_xp`` is (D, M+1).
    """

    T: int
    S_pp: np.ndarray   # sum E[phi~ phi~^T] at t-1
    S_xp: np.ndarray   # sum E[x_t phi~(x_{t-1})^T]
    S_xx: np.ndarray   # sum E[x_t x_t^T]
    G: np.ndarray      # (T, D, D) regression of x_t on x_{t-1}
    c: np.ndarray      # (T, D) intercept of that regression


def _data(Y, params=None):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if not np.all(np.isfinite(Y)):
        raise InvalidInputError("observations must be finite")
    if params is not None and Y.shape[1] != params.obs_dim:
        raise InvalidInputError(f"observations have width {Y.shape[1]}, model expects {params.obs_dim}")
    return Y


def _pair_regression(posterior):
    """Linear-Gaussian conditional ``x_t | x_{t-1}`` implied by the joint smoothing moments."""
    mu, S = posterior.smooth_mean, posterior.smooth_cov
    prev_S = S[:-1]
    # G_t = Cov(x_t, x_{t-1}) Sigma_{t-1}^-1 = (Sigma_{t-1}^-1 cross_{t-1})^T
    G = np.transpose(np.linalg.solve(prev_S, posterior.cross_cov), (0, 2, 1))
    c = mu[1:] - np.einsum("tij,tj->ti", G, mu[:-1])
    return G, c


def transition_stats(feature_map, posterior):
    mu, S = posterior.smooth_mean, posterior.smooth_cov
    T, D = mu.shape[0] - 1, mu.shape[1]
    M = feature_map.size
    Ephi, Eouter, Exphi = feature_map.moments(mu[:-1], S[:-1])
    G, c = _pair_regression(posterior)
    S_pp = np.empty((M + 1, M + 1))
    S_pp[:M, :M] = Eouter.sum(0)
    S_pp[:M, M] = S_pp[M, :M] = Ephi.sum(0)
    S_pp[M, M] = T
    # E[x_t phi(x_{t-1})^T] = c_t E[phi]^T + G_t E[x_{t-1} phi^T]
    Exnext = c[:, :, None] * Ephi[:, None, :] + np.einsum("tij,tjm->tim", G, Exphi)
    # linear block exactly: mu_t mu_{t-1}^T + Cov(x_t, x_{t-1})
    Exnext[:, :, :D] = mu[1:, :, None] * mu[:-1, None, :] + np.transpose(posterior.cross_cov, (0, 2, 1))
    S_xp = np.empty((D, M + 1))
    S_xp[:, :M] = Exnext.sum(0)
    S_xp[:, M] = mu[1:].sum(0)
    S_xx = (S[1:] + mu[1:, :, None] * mu[1:, None, :]).sum(0)
    return TransitionStats(T, symmetrize(S_pp), S_xp, symmetrize(S_xx), G, c)


def _gauss_expect_term(Sigma, R, n):
    """``-n/2 (D log 2pi + log|Sigma|) - tr(Sigma^-1 R)/2``."""
    L = safe_cholesky(Sigma, "covariance")
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Linv_R = np.linalg.solve(L, R)
    tr = np.trace(np.linalg.solve(L, Linv_R.T))
    return -0.5 * n * (Sigma.shape[0] * _LOG_2PI + logdet) - 0.5 * tr


def _transition_residual(stats, A, b):
    At = np.hstack([A, b[:, None]])
    AS = At @ stats.S_xp.T
    return symmetrize(stats.S_xx - AS - AS.T + At @ stats.S_pp @ At.T)


def _observation_residual(posterior, Y, C, d):
    mu, S = posterior.smooth_mean[1:], posterior.smooth_cov[1:]
    r = Y - mu @ C.T - d
    return symmetrize(r.T @ r + C @ S.sum(0) @ C.T)


def q_function(params, posterior, data, stats=None):
    """Expected complete-data log-likelihood ``Q(params, posterior)``."""
    Y = _data(data, params)
    if stats is None:
        stats = transition_stats(params.feature_map, posterior)
    T = Y.shape[0]
    m0, S0 = posterior.smooth_mean[0], posterior.smooth_cov[0]
    e0 = m0 - params.mu0
    q_init = _gauss_expect_term(params.Sigma0, S0 + np.outer(e0, e0), 1)
    q_obs = _gauss_expect_term(params.Sigma_y, _observation_residual(posterior, Y, params.C, params.d), T)
    q_trans = _gauss_expect_term(params.Sigma_x, _transition_residual(stats, params.A, params.b), stats.T)
    return float(q_init + q_obs + q_trans)


def _floor_cov(S):
    S = symmetrize(S)
    w, V = np.linalg.eigh(S)
    floor = max(COV_FLOOR, COV_FLOOR * w.max())
    if w.min() >= floor:
        return S
    return symmetrize((V * np.maximum(w, floor)) @ V.T)


def _solve_transition(stats):
    G = stats.S_pp
    M1 = G.shape[0]
    reg = GRAM_RIDGE * np.trace(G) / M1
    if np.linalg.cond(G) > 1e12:
        warnings.warn("near-singular feature Gram matrix in transition M-step; ridge regularisation applied",
                      RuntimeWarning, stacklevel=3)
    At = np.linalg.solve(G + reg * np.eye(M1), stats.S_xp.T).T
    A, b = At[:, :-1], At[:, -1]
    Sx = _floor_cov(_transition_residual(stats, A, b) / stats.T)
    return A, b, Sx


def m_step_transition(posterior, data, feature_map):
    """Joint closed-form ``(A, b, Sigma_x)`` for a fixed feature map."""
    return _solve_transition(transition_stats(feature_map, posterior))


def m_step_observation(posterior, data, params):
    """Closed-form ``(C, d, Sigma_y)`` respecting the ``C_fixed``/``d_fixed`` flags."""
    Y = _data(data, params)
    mu, S = posterior.smooth_mean[1:], posterior.smooth_cov[1:]
    T, D = mu.shape
    Exx = S.sum(0) + mu.T @ mu
    C, d = params.C, params.d
    if not params.C_fixed and not params.d_fixed:
        Sxx = np.empty((D + 1, D + 1))
        Sxx[:D, :D] = Exx
        Sxx[:D, D] = Sxx[D, :D] = mu.sum(0)
        Sxx[D, D] = T
        Syx = np.hstack([Y.T @ mu, Y.sum(0)[:, None]])
        Cd = np.linalg.solve(symmetrize(Sxx), Syx.T).T
        C, d = Cd[:, :D], Cd[:, D]
    elif not params.C_fixed:
        C = np.linalg.solve(symmetrize(Exx), ((Y - d).T @ mu).T).T
    elif not params.d_fixed:
        d = (Y - mu @ C.T).mean(0)
    Sy = _floor_cov(_observation_residual(posterior, Y, C, d) / T)
    return C, d, Sy


def m_step_initial(posterior):
    return posterior.smooth_mean[0].copy(), _floor_cov(posterior.smooth_cov[0])


def kernel_objective_terms(params, posterior, stats=None):
    """Coefficients of the kernel-dependent part of the transition Q-term.

    Returns ``(mus, Sigmas, alpha, beta, Knl)`` as consumed by the kernel
    gradient routines; the objective equals the transition Q-term up to a
    constant that does not depend on the kernel parameters.
    """
    if stats is None:
        G, c = _pair_regression(posterior)
    else:
        G, c = stats.G, stats.c
    D = params.latent_dim
    Lx = safe_cholesky(params.Sigma_x, "Sigma_x")
    B = np.linalg.solve(Lx.T, np.linalg.solve(Lx, params.A))   # Sigma_x^-1 A
    K = params.A.T @ B
    h = B.T @ params.b
    Bn = B[:, D:]
    alpha = c @ Bn - h[D:]
    beta = np.einsum("tji,jl->tli", G, Bn) - K[:D, D:].T[None]
    Knl = symmetrize(K[D:, D:])
    return (posterior.smooth_mean[:-1], posterior.smooth_cov[:-1], alpha,
            np.ascontiguousarray(beta), Knl)


def kernel_objective(feature_map, terms):
    """Objective value and gradient w.r.t. ``feature_map.kernel_params()``."""
    mus, Sigmas, alpha, beta, Knl = terms
    if feature_map.kind == RIDGE:
        F, g1, g2 = _kernels.ridge_qgrad(mus, Sigmas, alpha, beta, Knl,
                                         feature_map.bank.W, feature_map.bank.w_tilde)
    else:
        F, g1, g2 = _kernels.rbf_qgrad(mus, Sigmas, alpha, beta, Knl,
                                       feature_map.bank.C, feature_map.bank.s)
    return float(F), np.concatenate([np.ravel(g1), np.ravel(g2)])


def m_step_kernels(params, posterior, data, config, stats=None, trace=None):
    """Improve the kernel parameters with ``A``, ``b``, ``Sigma_x`` held fixed.

    Returns the new feature map; the old one is kept if the optimiser fails
    to increase the objective or produces non-finite values.
    """
    fm = params.feature_map
    if fm.n_kernels == 0 or config.kernel_opt_max_steps == 0:
        return fm
    terms = kernel_objective_terms(params, posterior, stats)
    theta0 = fm.kernel_params()

    def neg(theta):
        try:
            F, g = kernel_objective(fm.with_kernel_params(theta), terms)
        except InvalidInputError:
            return np.inf, np.zeros_like(theta)
        return -F, -g

    f0, g0 = neg(theta0)
    if not (np.isfinite(f0) and np.all(np.isfinite(g0))):
        _note(trace, "non-finite kernel gradient; kernel step skipped")
        return fm
    res = scipy.optimize.minimize(
        neg, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": int(config.kernel_opt_max_steps),
                 "gtol": float(config.kernel_opt_gradient_tolerance)})
    if not (np.isfinite(res.fun) and np.all(np.isfinite(res.x))):
        _note(trace, "kernel optimiser produced non-finite values; kernel step skipped")
        return fm
    if res.fun > f0:
        return fm
    return fm.with_kernel_params(res.x)


def _note(trace, msg):
    log.warning(msg)
    if trace is not None:
        trace.warnings.append(msg)


def m_step(params, posterior, data, config, trace=None, learn_kernels=True):
    """Full M-step: transition, kernels, transition again, observation, initial."""
    stats = transition_stats(params.feature_map, posterior)
    A, b, Sx = _solve_transition(stats)
    params = params.replace(A=A, b=b, Sigma_x=Sx)
    if learn_kernels and params.n_kernels:
        fm = m_step_kernels(params, posterior, data, config, stats, trace)
        if fm is not params.feature_map:
            stats = transition_stats(fm, posterior)
            A, b, Sx = _solve_transition(stats)
            params = params.replace(feature_map=fm, A=A, b=b, Sigma_x=Sx)
    C, d, Sy = m_step_observation(posterior, data, params)
    mu0, S0 = m_step_initial(posterior)
    return params.replace(C=C, d=d, Sigma_y=Sy, mu0=mu0, Sigma0=S0)


# ---------------------------------------------------------------------------
# initialisation and the EM loop
# ---------------------------------------------------------------------------

def initial_linear_params(Y, latent_dim, C=None, d=None, seed=0):
    """Linear starting point: PCA observation map, ``A = 0.9 I``, noise ``0.1 I``."""
    Y = _data(Y)
    T, Dy = Y.shape
    rng = np.random.default_rng(seed)
    C_fixed, d_fixed = C is not None, d is not None
    d = Y.mean(0) if d is None else np.asarray(d, dtype=float).reshape(Dy)
    if C is None:
        Yc = Y - d
        _, sv, Vt = np.linalg.svd(Yc, full_matrices=False)
        k = min(latent_dim, Vt.shape[0])
        C = np.zeros((Dy, latent_dim))
        C[:, :k] = Vt[:k].T * (sv[:k] / np.sqrt(max(T - 1, 1)))
        if k < latent_dim:
            C[:, k:] = 0.1 * rng.standard_normal((Dy, latent_dim - k))
    C = np.asarray(C, dtype=float).reshape(Dy, latent_dim)
    mu0 = np.linalg.pinv(C) @ (Y[0] - d)
    eye = np.eye(latent_dim)
    return ModelParams(0.9 * eye, np.zeros(latent_dim), FeatureMap.linear(latent_dim), 0.1 * eye,
                       C, d, 0.1 * np.eye(Dy), mu0, eye.copy(), C_fixed=C_fixed, d_fixed=d_fixed)


def add_kernels(params, posterior, n_kernels, kind=RIDGE, seed=0):
    """Extend a linear model with ``n_kernels`` kernels placed where the latent path lives."""
    D = params.latent_dim
    rng = np.random.default_rng(seed)
    mu = posterior.filt_mean[1:]
    std = float(np.sqrt(np.mean(np.var(mu, axis=0))))
    if not std > 0:
        std = 1.0
    W = rng.standard_normal((n_kernels, D))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    W /= std
    proj = mu @ W.T
    wt = rng.uniform(proj.min(0), proj.max(0))
    A = np.hstack([params.A_lin, 0.01 * rng.standard_normal((D, n_kernels))])
    fm = FeatureMap.ridge(W, wt)
    if kind == RBF:
        if D == 1:
            fm = fm.to_rbf()
        else:
            centres = mu[rng.choice(mu.shape[0], size=n_kernels, replace=mu.shape[0] < n_kernels)]
            fm = FeatureMap.rbf(centres, np.full(n_kernels, std))
    elif kind != RIDGE:
        raise InvalidInputError(f"unknown kernel kind {kind!r}")
    return params.replace(A=A, feature_map=fm)


def initialize(Y, latent_dim, n_kernels=0, kind=RIDGE, config=None, C=None, d=None):
    """Deterministic starting parameters for :func:`fit` (pilot linear EM first when L > 0)."""
    config = config or EmConfig()
    params = initial_linear_params(Y, latent_dim, C=C, d=d, seed=config.seed)
    if n_kernels == 0:
        return params
    for _ in range(config.pilot_iterations):
        post = run_inference(params, Y)
        params = m_step(params, post, Y, config, learn_kernels=False)
    post = run_inference(params, Y, smooth=False)
    return add_kernels(params, post, n_kernels, kind, seed=config.seed)


def fit(data, config=None, init=None, *, latent_dim=None, n_kernels=0, kind=RIDGE, C=None, d=None,
        callback=None):
    """EM.  Returns the best parameters seen (by log-ML) and the trace.

    ``init`` may be a :class:`ModelParams`; otherwise one is built by
    :func:`initialize` from ``latent_dim``, ``n_kernels``, ``kind`` and the
    optional fixed ``C``/``d``.  ``callback(iteration, log_ml, params)``
    receives the parameters that produced ``log_ml``.
    """
    config = config or EmConfig()
    Y = _data(data)
    if Y.shape[0] < 2:
        raise InvalidInputError("need at least two observations to learn a transition")
    trace = EmTrace()
    if init is None:
        if latent_dim is None:
            raise InvalidInputError("latent_dim is required when no initial parameters are given")
        init = initialize(Y, latent_dim, n_kernels, kind, config, C=C, d=d)
    params = init
    _data(Y, params)
    best, best_ll = params, -np.inf
    prev = None
    trace.termination = MAX_ITERATIONS
    for it in range(config.max_iterations):
        t0 = time.perf_counter()
        try:
            post = run_inference(params, Y)
        except NumericalError as exc:
            _note(trace, f"E-step failed at iteration {it}: {exc}")
            trace.termination = NUMERICAL_FAILURE
            break
        ll = post.log_marginal_likelihood
        evaluated = params
        if ll > best_ll:
            best, best_ll = params, ll
        converged = prev is not None and abs(ll - prev) <= config.convergence_ratio * abs(prev)
        if not converged and it < config.max_iterations - 1:
            try:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", RuntimeWarning)
                    params = m_step(params, post, Y, config, trace, learn_kernels=config.learn_kernels)
                for w in caught:
                    if str(w.message) not in trace.warnings:
                        trace.warnings.append(str(w.message))
            except (NumericalError, np.linalg.LinAlgError, InvalidInputError) as exc:
                trace.append(ll, time.perf_counter() - t0)
                _note(trace, f"M-step failed at iteration {it}: {exc}")
                trace.termination = NUMERICAL_FAILURE
                break
        trace.append(ll, time.perf_counter() - t0)
        log.info("iteration %d  log-ML %.6f", it, ll)
        if callback is not None:
            callback(it, ll, evaluated)
        if converged:
            trace.termination = CONVERGED
            break
        prev = ll
    return best, trace
