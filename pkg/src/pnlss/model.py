"""The PNL-SS parameter set, generative sampling and the ``.pnlss.json`` format.

    x_t = A phi(x_{t-1}) + b + xi_t,    xi_t ~ N(0, Sigma_x)
    y_t = C x_t + d + zeta_t,           zeta_t ~ N(0, Sigma_y)
    x_0 ~ N(mu0, Sigma0)
"""
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, SchemaError
from .features import RBF, RIDGE, FeatureMap, RbfKernelBank, RidgeKernelBank
from .gauss import safe_cholesky

SCHEMA_NAME = "pnlss-model"
SCHEMA_VERSION = "1.0.0"

_MATRIX_FIELDS = ("A", "b", "Sigma_x", "C", "d", "Sigma_y", "mu0", "Sigma0")
_COVARIANCES = ("Sigma_x", "Sigma_y", "Sigma0")


@dataclass(frozen=True, eq=False)
class ModelParams:
    A: np.ndarray
    b: np.ndarray
    feature_map: FeatureMap
    Sigma_x: np.ndarray
    C: np.ndarray
    d: np.ndarray
    Sigma_y: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    C_fixed: bool = False
    d_fixed: bool = False

    def __post_init__(self):
        for name in _MATRIX_FIELDS:
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        Dx, Dy, M = self.latent_dim, self.obs_dim, self.feature_map.size
        shapes = {"A": (Dx, M), "b": (Dx,), "Sigma_x": (Dx, Dx), "C": (Dy, Dx), "d": (Dy,),
                  "Sigma_y": (Dy, Dy), "mu0": (Dx,), "Sigma0": (Dx, Dx)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InvalidInputError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def latent_dim(self):
        return self.feature_map.dim

    @property
    def obs_dim(self):
        return np.shape(self.C)[0]

    @property
    def n_kernels(self):
        return self.feature_map.n_kernels

    @property
    def A_lin(self):
        return self.A[:, :self.latent_dim]

    @property
    def A_nl(self):
        return self.A[:, self.latent_dim:]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def linear_params(A_lin, b, Sigma_x, C, d, Sigma_y, mu0, Sigma0, **flags):
    """Model with no kernels, i.e. a linear-Gaussian state-space model."""
    A_lin = np.atleast_2d(A_lin)
    return ModelParams(A_lin, b, FeatureMap.linear(A_lin.shape[0]), Sigma_x, C, d, Sigma_y,
                       mu0, Sigma0, **flags)


def transition_mean(params, x):
    """``f(x) = A phi(x) + b`` for one point (D,) or many points (N, D)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("state must be finite")
    phi = np.concatenate([X, params.feature_map.eval_nonlinear(X)], axis=1)
    out = phi @ params.A.T + params.b
    return out[0] if single else out


def sample_trajectory(params, T, rng_seed=None):
    """Draw ``(latents, observations)`` for ``t = 1..T``; deterministic in the seed."""
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    rng = np.random.default_rng(rng_seed)
    Dx, Dy = params.latent_dim, params.obs_dim
    Lx = safe_cholesky(params.Sigma_x, "Sigma_x")
    Ly = safe_cholesky(params.Sigma_y, "Sigma_y")
    L0 = safe_cholesky(params.Sigma0, "Sigma0")
    x = params.mu0 + L0 @ rng.standard_normal(Dx)
    xs = np.empty((T, Dx))
    ys = np.empty((T, Dy))
    for t in range(T):
        x = transition_mean(params, x) + Lx @ rng.standard_normal(Dx)
        xs[t] = x
        ys[t] = params.C @ x + params.d + Ly @ rng.standard_normal(Dy)
    return xs, ys


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def _encode(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode(doc, name):
    try:
        shape = tuple(int(n) for n in doc["shape"])
        data = np.array(doc["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"field {name!r} is malformed: {exc}") from None
    if data.size != int(np.prod(shape)):
        raise SchemaError(f"field {name!r}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def serialize(params):
    """Self-describing JSON-compatible document (row-major arrays with shapes)."""
    fm = params.feature_map
    if fm.kind == RIDGE:
        kernel = {"kind": RIDGE, "W": _encode(fm.bank.W), "w_tilde": _encode(fm.bank.w_tilde)}
    else:
        kernel = {"kind": RBF, "C": _encode(fm.bank.C), "s": _encode(fm.bank.s)}
    doc = {"format": SCHEMA_NAME, "schema_version": SCHEMA_VERSION,
           "latent_dim": params.latent_dim, "obs_dim": params.obs_dim, "kernel": kernel}
    for name in _MATRIX_FIELDS:
        doc[name] = _encode(getattr(params, name))
    doc["flags"] = {"C_fixed": bool(params.C_fixed), "d_fixed": bool(params.d_fixed)}
    return doc


def deserialize(doc):
    if doc.get("format") != SCHEMA_NAME:
        raise SchemaError(f"not a {SCHEMA_NAME} document")
    version = str(doc.get("schema_version", ""))
    if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported schema version {version!r} (this build reads {SCHEMA_VERSION})")
    kernel = doc.get("kernel", {})
    Dx = int(doc["latent_dim"])
    if kernel.get("kind") == RIDGE:
        W = _decode(kernel["W"], "kernel.W").reshape(-1, Dx)
        fm = FeatureMap(RIDGE, RidgeKernelBank(W, _decode(kernel["w_tilde"], "kernel.w_tilde")), Dx)
    elif kernel.get("kind") == RBF:
        C = _decode(kernel["C"], "kernel.C").reshape(-1, Dx)
        try:
            fm = FeatureMap(RBF, RbfKernelBank(C, _decode(kernel["s"], "kernel.s")), Dx)
        except InvalidInputError as exc:
            raise SchemaError(f"field 'kernel.s': {exc}") from None
    else:
        raise SchemaError(f"unknown kernel kind {kernel.get('kind')!r}")
    fields = {name: _decode(doc[name], name) if name in doc else None for name in _MATRIX_FIELDS}
    missing = [n for n, v in fields.items() if v is None]
    if missing:
        raise SchemaError(f"missing fields: {', '.join(missing)}")
    for name in _COVARIANCES:
        S = fields[name]
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise SchemaError(f"field {name!r} is not square")
        if np.max(np.abs(S - S.T), initial=0.0) > 1e-12 * max(np.max(np.abs(S)), 1e-300):
            raise SchemaError(f"field {name!r} is not symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise SchemaError(f"field {name!r} is not positive definite")
    flags = doc.get("flags", {})
    try:
        return ModelParams(feature_map=fm, C_fixed=bool(flags.get("C_fixed", False)),
                           d_fixed=bool(flags.get("d_fixed", False)), **fields)
    except InvalidInputError as exc:
        raise SchemaError(str(exc)) from None


def save(params, path):
    with open(path, "w") as fh:
        json.dump(serialize(params), fh, indent=1)


def load(path):
    with open(path) as fh:
        return deserialize(json.load(fh))
