"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version.  The public wrappers at the bottom of the module pick
one according to :data:`pnlss._backend.USE_NUMBA`.  Both take batches of
Gaussians ``mus (N, D)`` / ``Sigmas (N, D, D)`` so the same call serves the
filter (``N == 1``) and the M-step statistics (``N == T``).

Ridge kernels: ``phi_l(x) = exp(-(w_l.x - wt_l)**2 / 2)``.
RBF kernels:   ``phi_l(x) = exp(-|x - c_l|**2 / (2 s_l**2))``.

The ridge path only ever touches scalars and 2x2 systems per kernel pair.  The
RBF path solves a dense ``D x D`` system per kernel and per pair.
"""
import math

import numpy as np

from . import _backend
from ._backend import njit


# ---------------------------------------------------------------------------
# ridge kernels, numba
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ridge_moments_nb(mus, Sigmas, W, wt):
    N, D = mus.shape
    L = W.shape[0]
    e1 = np.empty((N, L))
    xe = np.empty((N, D, L))
    e2 = np.empty((N, L, L))
    SW = np.empty((L, D))
    s = np.empty(L)
    u = np.empty(L)
    for n in range(N):
        mu = mus[n]
        S = Sigmas[n]
        for l in range(L):
            sl = 0.0
            ml = 0.0
            for i in range(D):
                acc = 0.0
                for j in range(D):
                    acc += S[i, j] * W[l, j]
                SW[l, i] = acc
                sl += W[l, i] * acc
                ml += W[l, i] * mu[i]
            s[l] = sl
            u[l] = ml - wt[l]
            v = u[l] / (1.0 + sl)
            e = math.exp(-0.5 * math.log1p(sl) - 0.5 * u[l] * v)
            e1[n, l] = e
            for i in range(D):
                xe[n, i, l] = (mu[i] - SW[l, i] * v) * e
        for l in range(L):
            for m in range(l, L):
                g = 0.0
                for i in range(D):
                    g += W[m, i] * SW[l, i]
                a = 1.0 + s[l]
                d = 1.0 + s[m]
                det = a * d - g * g
                quad = (d * u[l] * u[l] - 2.0 * g * u[l] * u[m] + a * u[m] * u[m]) / det
                val = math.exp(-0.5 * math.log(det) - 0.5 * quad)
                e2[n, l, m] = val
                e2[n, m, l] = val
    return e1, xe, e2


@njit(cache=True)
def _ridge_qgrad_nb(mus, Sigmas, alpha, beta, Knl, W, wt):
    N, D = mus.shape
    L = W.shape[0]
    F = 0.0
    gW = np.zeros((L, D))
    gwt = np.zeros(L)
    SW = np.empty((L, D))
    s = np.empty(L)
    u = np.empty(L)
    Sb = np.empty(D)
    for n in range(N):
        mu = mus[n]
        S = Sigmas[n]
        for l in range(L):
            sl = 0.0
            ml = 0.0
            for i in range(D):
                acc = 0.0
                for j in range(D):
                    acc += S[i, j] * W[l, j]
                SW[l, i] = acc
                sl += W[l, i] * acc
                ml += W[l, i] * mu[i]
            s[l] = sl
            u[l] = ml - wt[l]
        for l in range(L):
            a1 = 1.0 + s[l]
            v = u[l] / a1
            e = math.exp(-0.5 * math.log1p(s[l]) - 0.5 * u[l] * v)
            q = 0.0
            bmu = 0.0
            for i in range(D):
                q += beta[n, l, i] * SW[l, i]
                bmu += beta[n, l, i] * mu[i]
                acc = 0.0
                for j in range(D):
                    acc += S[i, j] * beta[n, l, j]
                Sb[i] = acc
            g = bmu - q * v
            ce = (alpha[n, l] + g) * e
            F += ce
            c1 = v * v - 1.0 / a1
            for i in range(D):
                dlog = SW[l, i] * c1 - mu[i] * v
                dg = -(Sb[i] * v + q * (mu[i] - 2.0 * v * SW[l, i]) / a1)
                gW[l, i] += ce * dlog + e * dg
            gwt[l] += ce * v + e * q / a1
        for l in range(L):
            for m in range(l, L):
                k = Knl[l, m]
                if k == 0.0:
                    continue
                g = 0.0
                for i in range(D):
                    g += W[m, i] * SW[l, i]
                a = 1.0 + s[l]
                d = 1.0 + s[m]
                det = a * d - g * g
                i00 = d / det
                i11 = a / det
                i01 = -g / det
                v0 = i00 * u[l] + i01 * u[m]
                v1 = i01 * u[l] + i11 * u[m]
                quad = u[l] * v0 + u[m] * v1
                val = math.exp(-0.5 * math.log(det) - 0.5 * quad)
                wgt = -0.5 * k * val
                if m != l:
                    wgt *= 2.0
                F += wgt
                for i in range(D):
                    gl = SW[l, i] * (v0 * v0 - i00) + SW[m, i] * (v0 * v1 - i01) - mu[i] * v0
                    gm = SW[l, i] * (v0 * v1 - i01) + SW[m, i] * (v1 * v1 - i11) - mu[i] * v1
                    gW[l, i] += wgt * gl
                    gW[m, i] += wgt * gm
                gwt[l] += wgt * v0
                gwt[m] += wgt * v1
    return F, gW, gwt


# ---------------------------------------------------------------------------
# ridge kernels, numpy
# ---------------------------------------------------------------------------

def _ridge_common_np(mus, Sigmas, W, wt):
    SW = np.einsum("nij,lj->nli", Sigmas, W)
    s = np.einsum("nli,li->nl", SW, W)
    u = mus @ W.T - wt
    return SW, s, u


def _ridge_pairs_np(SW, s, u, W):
    gam = np.einsum("nli,mi->nlm", SW, W)
    a = (1.0 + s)[:, :, None]
    d = (1.0 + s)[:, None, :]
    det = a * d - gam ** 2
    ul = u[:, :, None]
    um = u[:, None, :]
    i00 = d / det
    i11 = a / det
    i01 = -gam / det
    v0 = i00 * ul + i01 * um
    v1 = i01 * ul + i11 * um
    e2 = np.exp(-0.5 * np.log(det) - 0.5 * (ul * v0 + um * v1))
    return e2, v0, v1, i00, i01


def _ridge_moments_np(mus, Sigmas, W, wt):
    SW, s, u = _ridge_common_np(mus, Sigmas, W, wt)
    v = u / (1.0 + s)
    e1 = np.exp(-0.5 * np.log1p(s) - 0.5 * u * v)
    xe = np.transpose(mus[:, None, :] - SW * v[:, :, None], (0, 2, 1)) * e1[:, None, :]
    e2 = _ridge_pairs_np(SW, s, u, W)[0]
    return e1, xe, e2


def _ridge_qgrad_np(mus, Sigmas, alpha, beta, Knl, W, wt):
    SW, s, u = _ridge_common_np(mus, Sigmas, W, wt)
    a1 = 1.0 + s
    v = u / a1
    e = np.exp(-0.5 * np.log1p(s) - 0.5 * u * v)
    q = np.einsum("nli,nli->nl", beta, SW)
    g = np.einsum("nli,ni->nl", beta, mus) - q * v
    ce = (alpha + g) * e
    F = ce.sum()
    Sb = np.einsum("nij,nlj->nli", Sigmas, beta)
    mu3 = mus[:, None, :]
    dlog = SW * (v * v - 1.0 / a1)[..., None] - mu3 * v[..., None]
    dg = -(Sb * v[..., None] + (q / a1)[..., None] * (mu3 - 2.0 * v[..., None] * SW))
    gW = np.einsum("nl,nli->li", ce, dlog) + np.einsum("nl,nli->li", e, dg)
    gwt = (ce * v + e * q / a1).sum(axis=0)

    e2, v0, v1, i00, i01 = _ridge_pairs_np(SW, s, u, W)
    # ordered double sum; kernel l collects twice the first-column gradient
    wgt = -0.5 * Knl[None] * e2
    F += wgt.sum()
    c_self = (wgt * (v0 * v0 - i00)).sum(axis=2)
    c_cross = wgt * (v0 * v1 - i01)
    c_mu = (wgt * v0).sum(axis=2)
    gW += 2.0 * (np.einsum("nl,nli->li", c_self, SW)
                 + np.einsum("nlm,nmi->li", c_cross, SW)
                 - np.einsum("nl,ni->li", c_mu, mus))
    gwt += 2.0 * c_mu.sum(axis=0)
    return F, gW, gwt


# ---------------------------------------------------------------------------
# RBF kernels, numba
# ---------------------------------------------------------------------------

@njit(cache=True)
def _chol_solve_small(P, B):
    """Solve ``P X = B`` for a small SPD ``P`` with an inline Cholesky; returns ``(X, logdet P)``.

    Calling LAPACK per kernel pair costs more in call overhead than the
    arithmetic for ``D <= 10``, so the factorisation is written out.
    """
    D = P.shape[0]
    K = B.shape[1]
    Lc = np.zeros((D, D))
    logdet = 0.0
    for j in range(D):
        acc = P[j, j]
        for k in range(j):
            acc -= Lc[j, k] * Lc[j, k]
        if acc <= 0.0:
            return np.full((D, K), np.nan), np.nan
        d = math.sqrt(acc)
        Lc[j, j] = d
        logdet += 2.0 * math.log(d)
        for i in range(j + 1, D):
            acc = P[i, j]
            for k in range(j):
                acc -= Lc[i, k] * Lc[j, k]
            Lc[i, j] = acc / d
    X = B.copy()
    for c in range(K):
        for i in range(D):
            acc = X[i, c]
            for k in range(i):
                acc -= Lc[i, k] * X[k, c]
            X[i, c] = acc / Lc[i, i]
        for i in range(D - 1, -1, -1):
            acc = X[i, c]
            for k in range(i + 1, D):
                acc -= Lc[k, i] * X[k, c]
            X[i, c] = acc / Lc[i, i]
    return X, logdet


@njit(cache=True)
def _rbf_tilt_nb(mu, S, a, cbar, kres):
    """Tilt N(mu, S) by exp(-a|x - cbar|^2 / 2 - kres); dense solve."""
    D = mu.shape[0]
    P = S.copy()
    for i in range(D):
        P[i, i] += 1.0 / a
    delta = mu - cbar
    rhs = np.empty((D, D + 1))
    rhs[:, :D] = S
    rhs[:, D] = delta
    sol, logdet = _chol_solve_small(P, rhs)
    quad = 0.0
    for i in range(D):
        quad += delta[i] * sol[i, D]
    loge = -0.5 * D * math.log(a) - 0.5 * logdet - 0.5 * quad - kres
    nu = np.empty(D)
    V = np.empty((D, D))
    for i in range(D):
        acc = mu[i]
        for k in range(D):
            acc -= S[i, k] * sol[k, D]
        nu[i] = acc
        for j in range(D):
            acc = S[i, j]
            for k in range(D):
                acc -= S[i, k] * sol[k, j]
            V[i, j] = acc
    return loge, nu, V


@njit(cache=True)
def _rbf_pair_params_nb(C, s, l, m):
    al = 1.0 / (s[l] * s[l])
    am = 1.0 / (s[m] * s[m])
    a = al + am
    cbar = (al * C[l] + am * C[m]) / a
    d2 = 0.0
    for i in range(C.shape[1]):
        d2 += (C[l, i] - C[m, i]) ** 2
    kres = 0.5 * d2 / (s[l] * s[l] + s[m] * s[m])
    return a, cbar, kres


@njit(cache=True)
def _rbf_moments_nb(mus, Sigmas, C, s):
    N, D = mus.shape
    L = C.shape[0]
    e1 = np.empty((N, L))
    xe = np.empty((N, D, L))
    e2 = np.empty((N, L, L))
    for n in range(N):
        mu = mus[n]
        S = Sigmas[n]
        for l in range(L):
            loge, nu, V = _rbf_tilt_nb(mu, S, 1.0 / (s[l] * s[l]), C[l], 0.0)
            e = math.exp(loge)
            e1[n, l] = e
            for i in range(D):
                xe[n, i, l] = nu[i] * e
        for l in range(L):
            for m in range(l, L):
                a, cbar, kres = _rbf_pair_params_nb(C, s, l, m)
                loge, nu, V = _rbf_tilt_nb(mu, S, a, cbar, kres)
                val = math.exp(loge)
                e2[n, l, m] = val
                e2[n, m, l] = val
    return e1, xe, e2


@njit(cache=True)
def _rbf_qgrad_nb(mus, Sigmas, alpha, beta, Knl, C, s):
    N, D = mus.shape
    L = C.shape[0]
    F = 0.0
    Ga = np.zeros(L)
    Geta = np.zeros((L, D))
    Gk = np.zeros(L)
    for n in range(N):
        mu = mus[n]
        S = Sigmas[n]
        for l in range(L):
            loge, nu, V = _rbf_tilt_nb(mu, S, 1.0 / (s[l] * s[l]), C[l], 0.0)
            e = math.exp(loge)
            b = beta[n, l]
            bnu = 0.0
            nn = 0.0
            trV = 0.0
            for i in range(D):
                bnu += b[i] * nu[i]
                nn += nu[i] * nu[i]
                trV += V[i, i]
            Vb = V @ b
            nuVb = 0.0
            for i in range(D):
                nuVb += nu[i] * Vb[i]
            al = alpha[n, l]
            F += (al + bnu) * e
            Ga[l] += -0.5 * e * (al * (trV + nn) + bnu * (trV + nn) + 2.0 * nuVb)
            for i in range(D):
                Geta[l, i] += e * (al * nu[i] + Vb[i] + nu[i] * bnu)
            Gk[l] += -e * (al + bnu)
        for l in range(L):
            for m in range(l, L):
                k = Knl[l, m]
                if k == 0.0:
                    continue
                a, cbar, kres = _rbf_pair_params_nb(C, s, l, m)
                loge, nu, V = _rbf_tilt_nb(mu, S, a, cbar, kres)
                wgt = -0.5 * k * math.exp(loge)
                if m != l:
                    wgt *= 2.0
                F += wgt
                nn = 0.0
                trV = 0.0
                for i in range(D):
                    nn += nu[i] * nu[i]
                    trV += V[i, i]
                ga = -0.5 * wgt * (trV + nn)
                Ga[l] += ga
                Ga[m] += ga
                for i in range(D):
                    Geta[l, i] += wgt * nu[i]
                    Geta[m, i] += wgt * nu[i]
                Gk[l] -= wgt
                Gk[m] -= wgt
    return F, Ga, Geta, Gk


# ---------------------------------------------------------------------------
# RBF kernels, numpy
# ---------------------------------------------------------------------------

def _rbf_tilt_np(mus, Sigmas, a, cbar, kres):
    """Batched dense tilt.  ``a``/``kres`` have shape (N, *K), ``cbar`` (N, *K, D)."""
    D = mus.shape[1]
    extra = a.ndim - 1
    S = Sigmas.reshape(Sigmas.shape[:1] + (1,) * extra + Sigmas.shape[1:])
    mu = mus.reshape(mus.shape[:1] + (1,) * extra + mus.shape[1:])
    P = S + (1.0 / a)[..., None, None] * np.eye(D)
    delta = mu - cbar
    rhs = np.concatenate([np.broadcast_to(S, P.shape), delta[..., None]], axis=-1)
    sol = np.linalg.solve(P, rhs)
    logdet = np.linalg.slogdet(P)[1]
    quad = np.einsum("...i,...i->...", delta, sol[..., D])
    loge = -0.5 * D * np.log(a) - 0.5 * logdet - 0.5 * quad - kres
    nu = mu - np.einsum("...ij,...j->...i", S, sol[..., D])
    V = S - S @ sol[..., :D]
    return loge, nu, V


def _rbf_pair_params_np(C, s):
    a1 = 1.0 / s ** 2
    a = a1[:, None] + a1[None, :]
    cbar = (a1[:, None, None] * C[:, None, :] + a1[None, :, None] * C[None, :, :]) / a[..., None]
    d2 = ((C[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    kres = 0.5 * d2 / (s[:, None] ** 2 + s[None, :] ** 2)
    return a, cbar, kres


def _rbf_moments_np(mus, Sigmas, C, s):
    N = mus.shape[0]
    L = C.shape[0]
    a = np.broadcast_to(1.0 / s ** 2, (N, L))
    loge, nu, _ = _rbf_tilt_np(mus, Sigmas, a, np.broadcast_to(C, (N,) + C.shape),
                               np.zeros((N, L)))
    e1 = np.exp(loge)
    xe = np.transpose(nu, (0, 2, 1)) * e1[:, None, :]
    pa, pc, pk = _rbf_pair_params_np(C, s)
    loge2 = _rbf_tilt_np(mus, Sigmas, np.broadcast_to(pa, (N, L, L)),
                         np.broadcast_to(pc, (N,) + pc.shape),
                         np.broadcast_to(pk, (N, L, L)))[0]
    return e1, xe, np.exp(loge2)


def _rbf_qgrad_np(mus, Sigmas, alpha, beta, Knl, C, s):
    N = mus.shape[0]
    L = C.shape[0]
    a = np.broadcast_to(1.0 / s ** 2, (N, L))
    loge, nu, V = _rbf_tilt_np(mus, Sigmas, a, np.broadcast_to(C, (N,) + C.shape),
                               np.zeros((N, L)))
    e = np.exp(loge)
    bnu = np.einsum("nli,nli->nl", beta, nu)
    nn = np.einsum("nli,nli->nl", nu, nu)
    trV = np.einsum("nlii->nl", V)
    Vb = np.einsum("nlij,nlj->nli", V, beta)
    nuVb = np.einsum("nli,nli->nl", nu, Vb)
    F = ((alpha + bnu) * e).sum()
    Ga = (-0.5 * e * ((alpha + bnu) * (trV + nn) + 2.0 * nuVb)).sum(axis=0)
    Geta = np.einsum("nl,nli->li", e, alpha[..., None] * nu + Vb + nu * bnu[..., None])
    Gk = -(e * (alpha + bnu)).sum(axis=0)

    pa, pc, pk = _rbf_pair_params_np(C, s)
    loge2, nu2, V2 = _rbf_tilt_np(mus, Sigmas, np.broadcast_to(pa, (N, L, L)),
                                  np.broadcast_to(pc, (N,) + pc.shape),
                                  np.broadcast_to(pk, (N, L, L)))
    wgt = -0.5 * Knl[None] * np.exp(loge2)
    F += wgt.sum()
    tot = np.einsum("nlmii->nlm", V2) + np.einsum("nlmi,nlmi->nlm", nu2, nu2)
    # ordered double sum: every pair feeds both members, symmetric in (l, m)
    Ga += 2.0 * (-0.5 * wgt * tot).sum(axis=(0, 2))
    Geta += 2.0 * np.einsum("nlm,nlmi->li", wgt, nu2)
    Gk += -2.0 * wgt.sum(axis=(0, 2))
    return F, Ga, Geta, Gk


# ---------------------------------------------------------------------------
# RK4 integration
# ---------------------------------------------------------------------------

VAN_DER_POL, FITZHUGH_NAGUMO, LORENZ = 0, 1, 2


def _rhs_py(system, p, x, out):
    if system == 0:
        out[0] = x[1]
        out[1] = p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0]
    elif system == 1:
        out[0] = 4.0 * (x[0] - x[0] ** 3 / 3.0 - x[1] + 0.7)
        out[1] = 4.0 * (x[0] + 0.8 - x[1]) / 12.5
    else:
        out[0] = p[0] * (x[1] - x[0])
        out[1] = x[0] * (p[1] - x[2]) - x[1]
        out[2] = x[0] * x[1] - p[2] * x[2]


def _rk4_py(system, p, x0, t_grid, h_max, rhs):
    D = x0.shape[0]
    T = t_grid.shape[0]
    out = np.empty((T, D))
    x = x0.copy()
    out[0] = x
    k1 = np.empty(D)
    k2 = np.empty(D)
    k3 = np.empty(D)
    k4 = np.empty(D)
    tmp = np.empty(D)
    for i in range(1, T):
        dt = t_grid[i] - t_grid[i - 1]
        n_sub = int(math.ceil(dt / h_max - 1e-9))
        if n_sub < 1:
            n_sub = 1
        h = dt / n_sub
        for _ in range(n_sub):
            rhs(system, p, x, k1)
            for j in range(D):
                tmp[j] = x[j] + 0.5 * h * k1[j]
            rhs(system, p, tmp, k2)
            for j in range(D):
                tmp[j] = x[j] + 0.5 * h * k2[j]
            rhs(system, p, tmp, k3)
            for j in range(D):
                tmp[j] = x[j] + h * k3[j]
            rhs(system, p, tmp, k4)
            for j in range(D):
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(D):
            if not math.isfinite(x[j]):
                out[i:] = np.nan
                return out
        out[i] = x
    return out


_rhs_nb = njit(cache=True)(_rhs_py)


@njit(cache=True)
def _rk4_nb(system, p, x0, t_grid, h_max):
    D = x0.shape[0]
    T = t_grid.shape[0]
    out = np.empty((T, D))
    x = x0.copy()
    out[0] = x
    k1 = np.empty(D)
    k2 = np.empty(D)
    k3 = np.empty(D)
    k4 = np.empty(D)
    tmp = np.empty(D)
    for i in range(1, T):
        dt = t_grid[i] - t_grid[i - 1]
        n_sub = int(math.ceil(dt / h_max - 1e-9))
        if n_sub < 1:
            n_sub = 1
        h = dt / n_sub
        for _ in range(n_sub):
            _rhs_nb(system, p, x, k1)
            for j in range(D):
                tmp[j] = x[j] + 0.5 * h * k1[j]
            _rhs_nb(system, p, tmp, k2)
            for j in range(D):
                tmp[j] = x[j] + 0.5 * h * k2[j]
            _rhs_nb(system, p, tmp, k3)
            for j in range(D):
                tmp[j] = x[j] + h * k3[j]
            _rhs_nb(system, p, tmp, k4)
            for j in range(D):
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(D):
            if not math.isfinite(x[j]):
                out[i:] = np.nan
                return out
        out[i] = x
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _as_batch(mus, Sigmas):
    return (np.ascontiguousarray(mus, dtype=np.float64),
            np.ascontiguousarray(Sigmas, dtype=np.float64))


def ridge_moments(mus, Sigmas, W, wt, use_numba=None):
    """Return ``E[phi_l]`` (N, L), ``E[x phi_l]`` (N, D, L), ``E[phi_l phi_m]`` (N, L, L)."""
    mus, Sigmas = _as_batch(mus, Sigmas)
    W = np.ascontiguousarray(W, dtype=np.float64)
    wt = np.ascontiguousarray(wt, dtype=np.float64)
    if _backend.USE_NUMBA if use_numba is None else use_numba:
        return _ridge_moments_nb(mus, Sigmas, W, wt)
    return _ridge_moments_np(mus, Sigmas, W, wt)


def rbf_moments(mus, Sigmas, C, s, use_numba=None):
    mus, Sigmas = _as_batch(mus, Sigmas)
    C = np.ascontiguousarray(C, dtype=np.float64)
    s = np.ascontiguousarray(s, dtype=np.float64)
    if _backend.USE_NUMBA if use_numba is None else use_numba:
        return _rbf_moments_nb(mus, Sigmas, C, s)
    return _rbf_moments_np(mus, Sigmas, C, s)


def ridge_qgrad(mus, Sigmas, alpha, beta, Knl, W, wt, use_numba=None):
    """Kernel-dependent part of the transition Q-term and its gradient.

    Evaluates ``sum_n sum_l (alpha[n,l] + beta[n,l].nu_l) E[phi_l]
    - 0.5 sum_n sum_lm Knl[l,m] E[phi_l phi_m]`` and its gradient with respect
    to ``W`` and ``wt``.
    """
    args = _as_batch(mus, Sigmas) + tuple(
        np.ascontiguousarray(a, dtype=np.float64) for a in (alpha, beta, Knl, W, wt))
    if _backend.USE_NUMBA if use_numba is None else use_numba:
        return _ridge_qgrad_nb(*args)
    return _ridge_qgrad_np(*args)


def rbf_qgrad(mus, Sigmas, alpha, beta, Knl, C, s, use_numba=None):
    """Same objective as :func:`ridge_qgrad` for RBF kernels.

    Returns ``F`` and the gradients with respect to ``C`` and ``log s``.
    """
    args = _as_batch(mus, Sigmas) + tuple(
        np.ascontiguousarray(a, dtype=np.float64) for a in (alpha, beta, Knl, C, s))
    if _backend.USE_NUMBA if use_numba is None else use_numba:
        F, Ga, Geta, Gk = _rbf_qgrad_nb(*args)
    else:
        F, Ga, Geta, Gk = _rbf_qgrad_np(*args)
    C = args[5]
    a = 1.0 / args[6] ** 2
    gC = a[:, None] * Geta + (a * Gk)[:, None] * C
    g_a = Ga + np.einsum("li,li->l", Geta, C) + 0.5 * (C ** 2).sum(1) * Gk
    return F, gC, -2.0 * a * g_a


def rk4(system, params, x0, t_grid, h_max, use_numba=None):
    p = np.ascontiguousarray(params, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    t_grid = np.ascontiguousarray(t_grid, dtype=np.float64)
    if _backend.USE_NUMBA if use_numba is None else use_numba:
        return _rk4_nb(int(system), p, x0, t_grid, float(h_max))
    return _rk4_py(int(system), p, x0, t_grid, float(h_max), _rhs_py)
