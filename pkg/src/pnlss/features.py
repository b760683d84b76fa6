"""Feature maps ``phi(x) = [x; phi_nl(x)]`` and their Gaussian expectations.

Ordering is fixed: the ``D_x`` linear features come first, the ``L`` kernel
features after them, so ``A[:, :D_x]`` is the linear block and ``A[:, D_x:]``
the kernel block everywhere in the package.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInputError

RIDGE = "ridge"
RBF = "rbf"


def _frozen(a, shape=None):
    a = np.array(a, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


def _rows(a, n):
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, -1)
    if a.ndim != 2 or a.shape[0] != n:
        raise InvalidInputError(f"expected {n} kernel rows, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RidgeKernelBank:
    """Projection vectors ``W`` (rows ``w_l``) and offsets ``w_tilde``."""

    W: np.ndarray
    w_tilde: np.ndarray

    def __post_init__(self):
        wt = _frozen(self.w_tilde).reshape(-1)
        W = _rows(self.W, wt.size)
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(wt))):
            raise InvalidInputError("ridge kernel parameters must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "w_tilde", wt)

    @property
    def n_kernels(self):
        return self.w_tilde.size


@dataclass(frozen=True, eq=False)
class RbfKernelBank:
    """Centres ``C`` (rows ``c_l``) and positive length scales ``s``."""

    C: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        s = _frozen(self.s).reshape(-1)
        C = _rows(self.C, s.size)
        if not (np.all(np.isfinite(C)) and np.all(np.isfinite(s))):
            raise InvalidInputError("RBF kernel parameters must be finite")
        if np.any(s <= 0):
            raise InvalidInputError("RBF length scales must be positive")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "s", s)

    @property
    def n_kernels(self):
        return self.s.size


@dataclass(frozen=True, eq=False)
class FeatureMap:
    kind: str
    bank: object
    dim: int

    def __post_init__(self):
        if self.kind not in (RIDGE, RBF):
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}")
        expected = RidgeKernelBank if self.kind == RIDGE else RbfKernelBank
        if not isinstance(self.bank, expected):
            raise InvalidInputError(f"{self.kind} feature map needs a {expected.__name__}")
        rows = self.bank.W if self.kind == RIDGE else self.bank.C
        if self.n_kernels and rows.shape[1] != self.dim:
            raise InvalidInputError(f"kernel bank width {rows.shape[1]} != latent dimension {self.dim}")

    @classmethod
    def linear(cls, dim):
        return cls(RIDGE, RidgeKernelBank(np.zeros((0, dim)), np.zeros(0)), dim)

    @classmethod
    def ridge(cls, W, w_tilde):
        bank = RidgeKernelBank(W, w_tilde)
        return cls(RIDGE, bank, np.atleast_2d(W).shape[1])

    @classmethod
    def rbf(cls, C, s):
        bank = RbfKernelBank(C, s)
        return cls(RBF, bank, np.atleast_2d(C).shape[1])

    @property
    def n_kernels(self):
        return self.bank.n_kernels

    @property
    def size(self):
        return self.dim + self.n_kernels

    # -- parameter vector used by the kernel optimiser ------------------------

    def kernel_params(self):
        """Flat unconstrained parameter vector: ``[W, w_tilde]`` or ``[C, log s]``."""
        if self.kind == RIDGE:
            return np.concatenate([self.bank.W.ravel(), self.bank.w_tilde])
        return np.concatenate([self.bank.C.ravel(), np.log(self.bank.s)])

    def with_kernel_params(self, theta):
        L, D = self.n_kernels, self.dim
        theta = np.asarray(theta, dtype=float)
        if self.kind == RIDGE:
            return FeatureMap.ridge(theta[:L * D].reshape(L, D), theta[L * D:])
        return FeatureMap.rbf(theta[:L * D].reshape(L, D), np.exp(theta[L * D:]))

    def to_rbf(self):
        """Equivalent RBF bank for a one-dimensional ridge bank.

        ``exp(-(w x - wt)^2 / 2) == exp(-(x - wt/w)^2 / (2 / w^2))``, so
        ``c = wt / w`` and ``s = 1 / |w|``.
        """
        if self.kind != RIDGE or self.dim != 1:
            raise InvalidInputError("ridge and RBF banks coincide only for a one-dimensional latent space")
        w = self.bank.W[:, 0]
        if np.any(w == 0):
            raise InvalidInputError("a zero projection has no RBF counterpart")
        return FeatureMap.rbf((self.bank.w_tilde / w)[:, None], 1.0 / np.abs(w))

    # -- evaluation -------------------------------------------------------------

    def eval_nonlinear(self, X):
        """Kernel features for points ``X`` of shape (N, D); returns (N, L)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == RIDGE:
            h = X @ self.bank.W.T - self.bank.w_tilde
            return np.exp(-0.5 * h ** 2)
        d2 = ((X[:, None, :] - self.bank.C[None]) ** 2).sum(-1)
        return np.exp(-0.5 * d2 / self.bank.s ** 2)

    def moments(self, mus, Sigmas):
        """Batched ``E[phi]`` (N, M), ``E[phi phi^T]`` (N, M, M), ``E[x phi^T]`` (N, D, M)."""
        mus = np.atleast_2d(mus)
        Sigmas = np.asarray(Sigmas).reshape(-1, self.dim, self.dim)
        N, D = mus.shape
        L = self.n_kernels
        M = D + L
        xx = Sigmas + mus[:, :, None] * mus[:, None, :]
        Ephi = np.empty((N, M))
        Ephi[:, :D] = mus
        Eouter = np.empty((N, M, M))
        Eouter[:, :D, :D] = xx
        if L:
            if self.kind == RIDGE:
                e1, xe, e2 = _kernels.ridge_moments(mus, Sigmas, self.bank.W, self.bank.w_tilde)
            else:
                e1, xe, e2 = _kernels.rbf_moments(mus, Sigmas, self.bank.C, self.bank.s)
            Ephi[:, D:] = e1
            Eouter[:, :D, D:] = xe
            Eouter[:, D:, :D] = np.transpose(xe, (0, 2, 1))
            Eouter[:, D:, D:] = e2
        return Ephi, Eouter, Eouter[:, :D, :]


def _single(p):
    return p.mean[None], p.covariance[None]


def eval_features(fm, x):
    """``phi(x)`` for a single point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("feature input must be finite")
    return np.concatenate([x, fm.eval_nonlinear(x[None])[0]])


def expect_features(fm, p):
    """``E_p[phi(x)]``."""
    _check_dim(fm, p)
    return fm.moments(*_single(p))[0][0]


def expect_outer_features(fm, p):
    """``E_p[phi(x) phi(x)^T]``."""
    _check_dim(fm, p)
    return fm.moments(*_single(p))[1][0]


def expect_x_next_features(fm, p):
    """``E_p[x phi(x)^T]``, shape (D_x, M)."""
    _check_dim(fm, p)
    return fm.moments(*_single(p))[2][0]


def _check_dim(fm, p):
    if p.dim != fm.dim:
        raise InvalidInputError(f"density dimension {p.dim} != feature map dimension {fm.dim}")
