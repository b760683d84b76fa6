"""Forecasting, SMAPE, vector fields, rollouts and the ridge-vs-RBF benchmark."""
import logging
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError, PnlssError
from .features import RBF, RIDGE
from .inference import _predict, run_inference
from .learning import EmConfig, fit
from .model import transition_mean

log = logging.getLogger(__name__)

COV_LIMIT = 1e12


def z_score(level):
    if not 0 < level < 1:
        raise InvalidInputError("interval level must lie in (0, 1)")
    return statistics.NormalDist().inv_cdf(0.5 + level / 2)


@dataclass
class Forecast:
    latent_mean: np.ndarray   # (H, D_x)
    latent_cov: np.ndarray    # (H, D_x, D_x)
    obs_mean: np.ndarray      # (H, D_y)
    obs_cov: np.ndarray       # (H, D_y, D_y)
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def horizon(self):
        return self.obs_mean.shape[0]


def forecast(params, last_filter, horizon, level=0.95):
    """Iterated moment-matched prediction with no observation updates.

    If a covariance entry exceeds 1e12 the forecast is truncated at the
    previous step and a warning is emitted.
    """
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    z = z_score(level)
    mu, S = np.array(last_filter.mean), np.array(last_filter.covariance)
    D = params.latent_dim
    lm, lc = np.empty((horizon, D)), np.empty((horizon, D, D))
    H = horizon
    for h in range(horizon):
        mu, S, _ = _predict(params, mu, S)
        if not (np.all(np.isfinite(S)) and np.abs(S).max() <= COV_LIMIT and np.all(np.isfinite(mu))):
            warnings.warn(f"forecast covariance exceeded {COV_LIMIT:g} at step {h + 1}; truncated",
                          RuntimeWarning, stacklevel=2)
            H = h
            break
        lm[h], lc[h] = mu, S
    lm, lc = lm[:H], lc[:H]
    om = lm @ params.C.T + params.d
    oc = symmetrize_batch(np.einsum("ij,hjk,lk->hil", params.C, lc, params.C) + params.Sigma_y)
    half = z * np.sqrt(np.einsum("hii->hi", oc))
    return Forecast(lm, lc, om, oc, om - half, om + half, level)


def symmetrize_batch(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def smape(actual, predicted):
    """``200 * mean(|z - zh| / (|z| + |zh|))``; terms with a zero denominator count as 0."""
    z = np.asarray(actual, dtype=float).reshape(-1)
    zh = np.asarray(predicted, dtype=float).reshape(-1)
    if z.size != zh.size:
        raise InvalidInputError(f"length mismatch: {z.size} vs {zh.size}")
    if z.size == 0:
        raise InvalidInputError("SMAPE of an empty series")
    den = np.abs(z) + np.abs(zh)
    num = np.abs(z - zh)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 * ratio.mean())


@dataclass
class VectorField:
    points: np.ndarray     # (N, D)
    total: np.ndarray      # (N, D) f(x) - x
    stages: np.ndarray     # (L + 1, N, D) linear part, then kernels added one at a time
    order: np.ndarray      # kernel indices in the order they were added


def vector_field(params, grid):
    """One-step displacement ``f(x) - x`` with a cumulative per-kernel decomposition.

    Kernels are added in descending order of the norm of their ``A_nl``
    column; the last stage equals ``total``.
    """
    X = np.atleast_2d(np.asarray(grid, dtype=float))
    if X.shape[1] != params.latent_dim:
        raise InvalidInputError(f"grid points must have {params.latent_dim} coordinates")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("grid points must be finite")
    L = params.n_kernels
    order = np.argsort(-np.linalg.norm(params.A_nl, axis=0), kind="stable")
    phi = params.feature_map.eval_nonlinear(X)
    stages = np.empty((L + 1,) + X.shape)
    acc = X @ params.A_lin.T + params.b - X
    stages[0] = acc
    for i, l in enumerate(order):
        acc = acc + np.outer(phi[:, l], params.A_nl[:, l])
        stages[i + 1] = acc
    return VectorField(X, stages[-1].copy(), stages, order)


def grid_points(lo, hi, n, dim=2):
    axes = [np.linspace(lo, hi, n)] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def recover_dynamics(params, initial_points, steps, bound=1e6):
    """Mean rollouts ``x_{t+1} = f(x_t)``; returns ``(trajectories, diverged)``.

    ``trajectories`` has shape (P, steps + 1, D); a trajectory is flagged as
    diverged once it leaves ``|x| < bound`` and is NaN from then on.
    """
    X = np.atleast_2d(np.asarray(initial_points, dtype=float))
    P, D = X.shape
    out = np.full((P, steps + 1, D), np.nan)
    out[:, 0] = X
    alive = np.all(np.isfinite(X), axis=1)
    x = X.copy()
    for t in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            x = transition_mean(params, np.where(alive[:, None], x, 0.0))
        alive &= np.all(np.isfinite(x), axis=1) & (np.abs(x).max(axis=1) < bound)
        out[alive, t + 1] = x[alive]
    return out, ~alive


def one_step_predictions(params, Y):
    """Filter one-step-ahead predictive means ``C mu^p_t + d`` for each row of ``Y``."""
    post = run_inference(params, Y, smooth=False)
    return post.pred_mean[1:] @ params.C.T + params.d


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkResult:
    method: str
    dataset: str
    n_kernels: int
    latent_dim: int
    n_kernel_params: int
    smape: float
    log_ml: float
    iterations: int
    seconds_per_iteration: float
    seconds_total: float
    mode: str = "fixed"
    error: str = ""

    def as_row(self):
        return asdict(self)


def _run_cell(args):
    dataset_id, Y, kind, L, latent_dim, config, mode, horizon = args
    train = Y[:-horizon] if horizon else Y
    t0 = time.perf_counter()
    try:
        params, trace = fit(train, config, latent_dim=latent_dim, n_kernels=L, kind=kind)
        total = time.perf_counter() - t0
        if horizon:
            post = run_inference(params, train, smooth=False)
            fc = forecast(params, post.filter_density(post.T), horizon)
            score = smape(Y[-horizon:][:fc.horizon], fc.obs_mean)
        else:
            score = smape(train, one_step_predictions(params, train))
        per_iter = float(np.median(trace.seconds)) if trace.seconds else float("nan")
        return BenchmarkResult(kind, dataset_id, L, latent_dim, L * (latent_dim + 1), score,
                               max(trace.log_ml), len(trace), per_iter, total, mode)
    except (PnlssError, np.linalg.LinAlgError) as exc:
        return BenchmarkResult(kind, dataset_id, L, latent_dim, L * (latent_dim + 1), float("nan"),
                               float("nan"), 0, float("nan"), time.perf_counter() - t0, mode, str(exc))


def benchmark_pnlss_vs_rbf(datasets, kernel_counts, config=None, latent_dim=3, em_iterations=50,
                           convergence_run=False, jobs=1, horizon=0, kinds=(RIDGE, RBF)):
    """Fit ridge and RBF banks for every ``(dataset, L)`` cell.

    ``datasets`` is a sequence of ``(dataset_id, observations)``.  The timing
    run uses exactly ``em_iterations`` EM iterations; with
    ``convergence_run`` a second fit per cell runs to ``config``'s
    convergence criterion.  Both kinds share the seed, so their pilot fits
    and kernel placements are matched.  Failed cells are recorded with
    ``error`` set.  Timings are only comparable with ``jobs=1``.
    """
    config = config or EmConfig()
    fixed = EmConfig(**{**asdict(config), "max_iterations": em_iterations, "convergence_ratio": 1e-300})
    cells = []
    for dataset_id, Y in datasets:
        Y = np.asarray(Y, dtype=float)
        for L in kernel_counts:
            for kind in kinds:
                cells.append((dataset_id, Y, kind, int(L), latent_dim, fixed, "fixed", horizon))
                if convergence_run:
                    cells.append((dataset_id, Y, kind, int(L), latent_dim, config, "converged", horizon))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    for r in results:
        if r.error:
            log.warning("benchmark cell %s/%s/L=%d failed: %s", r.dataset, r.method, r.n_kernels, r.error)
    return results
