"""Ground-truth trajectories: ODE systems, RK4 integration, noise, scaling, delay embedding."""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import InvalidInputError, NumericalError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3

_SYSTEMS = {
    "van_der_pol": (_kernels.VAN_DER_POL, 2, {"gamma": 1.0}),
    "fitzhugh_nagumo": (_kernels.FITZHUGH_NAGUMO, 2, {}),
    "lorenz": (_kernels.LORENZ, 3, {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}),
}

# protocol defaults per system: initial state, time span, sample count
PROTOCOLS = {
    "van_der_pol": ((1.0, 0.0), (0.0, 40.0), 250),
    "fitzhugh_nagumo": ((0.0, 2.0), (0.0, 119.9), 1200),
    "lorenz": ((1.0, 1.0, 1.0), (0.0, 30.0), 300),
}


@dataclass(frozen=True)
class OdeSystem:
    name: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in _SYSTEMS:
            raise InvalidInputError(f"unknown system {self.name!r}; choose from {sorted(_SYSTEMS)}")
        defaults = _SYSTEMS[self.name][2]
        unknown = set(self.parameters) - set(defaults)
        if unknown:
            raise InvalidInputError(f"{self.name} has no parameter(s) {sorted(unknown)}")
        params = {**defaults, **{k: float(v) for k, v in self.parameters.items()}}
        if not all(np.isfinite(v) for v in params.values()):
            raise InvalidInputError("system parameters must be finite")
        object.__setattr__(self, "parameters", params)

    @classmethod
    def van_der_pol(cls, gamma=1.0):
        return cls("van_der_pol", {"gamma": gamma})

    @classmethod
    def fitzhugh_nagumo(cls):
        return cls("fitzhugh_nagumo")

    @classmethod
    def lorenz(cls, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
        return cls("lorenz", {"sigma": sigma, "rho": rho, "beta": beta})

    @property
    def dimension(self):
        return _SYSTEMS[self.name][1]

    @property
    def _id(self):
        return _SYSTEMS[self.name][0]

    def _param_vector(self):
        return np.array([self.parameters[k] for k in _SYSTEMS[self.name][2]] or [0.0])

    def rhs(self, x):
        """Time derivative at ``x``."""
        out = np.empty(self.dimension)
        _kernels._rhs_py(self._id, self._param_vector(), np.asarray(x, dtype=float), out)
        return out


def integrate(system, initial_state, t_grid, step=DEFAULT_STEP):
    """Fixed-step RK4 sampled at ``t_grid``; each grid interval is split into ``ceil(dt/step)`` substeps."""
    x0 = np.asarray(initial_state, dtype=float).reshape(-1)
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    if x0.size != system.dimension:
        raise InvalidInputError(f"{system.name} needs a {system.dimension}-dimensional initial state")
    if t_grid.size < 1 or np.any(np.diff(t_grid) <= 0):
        raise InvalidInputError("t_grid must be strictly increasing")
    if not step > 0:
        raise InvalidInputError("integrator step must be positive")
    out = _kernels.rk4(system._id, system._param_vector(), x0, t_grid, step)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericalError(f"{system.name} integration diverged before t={t_grid[i]:g}")
    return out


def add_observation_noise(trajectory, variance, seed=None):
    X = np.asarray(trajectory, dtype=float)
    if variance < 0:
        raise InvalidInputError("noise variance must be non-negative")
    if variance == 0:
        return X.copy()
    rng = np.random.default_rng(seed)
    return X + np.sqrt(variance) * rng.standard_normal(X.shape)


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=float) * self.std + self.mean


def standardize(series):
    """Zero-mean, unit-std columns; returns ``(scaled, Standardization)``."""
    X = np.asarray(series, dtype=float)
    X2 = X.reshape(X.shape[0], -1)
    mean = X2.mean(0)
    std = X2.std(0)
    if np.any(std <= 0):
        raise InvalidInputError(f"cannot standardize constant dimension(s) {np.flatnonzero(std <= 0).tolist()}")
    tr = Standardization(mean, std)
    return tr.apply(X2).reshape(X.shape), tr


def unstandardize(series, transform):
    return transform.invert(series)


def default_stride(dim):
    return max(1, int(round(200 / dim)))


def delay_embed(series, dim, stride=None):
    """Rows ``[z_{t-(D-1)s}, ..., z_{t-s}, z_t]``; the last column is the undelayed signal."""
    z = np.asarray(series, dtype=float).reshape(-1)
    if dim < 1:
        raise InvalidInputError("embedding dimension must be at least 1")
    stride = default_stride(dim) if stride is None else int(stride)
    if stride < 1:
        raise InvalidInputError("stride must be at least 1")
    span = (dim - 1) * stride
    if z.size <= span:
        raise InvalidInputError(f"series of length {z.size} too short; need more than {span} samples")
    n = z.size - span
    return np.stack([z[k * stride:k * stride + n] for k in range(dim)], axis=1)


@dataclass
class GenerationSpec:
    system: OdeSystem
    initial_state: tuple = None
    t_span: tuple = None
    sample_count: int = None
    integrator_step: float = DEFAULT_STEP
    noise_variance: float = 0.0
    standardize: bool = False
    seed: int = 0
    split_index: int = None

    def __post_init__(self):
        x0, span, n = PROTOCOLS[self.system.name]
        self.initial_state = tuple(float(v) for v in (x0 if self.initial_state is None else self.initial_state))
        self.t_span = tuple(float(v) for v in (span if self.t_span is None else self.t_span))
        self.sample_count = int(n if self.sample_count is None else self.sample_count)
        if self.sample_count < 2:
            raise InvalidInputError("sample_count must be at least 2")
        if self.noise_variance < 0:
            raise InvalidInputError("noise_variance must be non-negative")
        if not self.t_span[1] > self.t_span[0]:
            raise InvalidInputError("t_span must be increasing")

    @property
    def t_grid(self):
        return np.linspace(self.t_span[0], self.t_span[1], self.sample_count)


@dataclass
class Dataset:
    observations: np.ndarray
    clean: np.ndarray
    t: np.ndarray
    meta: dict


def generate(spec):
    """Integrate, optionally standardize, then add observation noise."""
    t = spec.t_grid
    clean = integrate(spec.system, spec.initial_state, t, spec.integrator_step)
    meta = {
        "system": spec.system.name,
        "parameters": dict(spec.system.parameters),
        "initial_state": list(spec.initial_state),
        "t_span": list(spec.t_span),
        "sample_count": spec.sample_count,
        "integrator_step": spec.integrator_step,
        "noise_variance": spec.noise_variance,
        "seed": spec.seed,
        "standardization": None,
        "split_index": spec.split_index,
    }
    if spec.standardize:
        clean, tr = standardize(clean)
        meta["standardization"] = {"mean": tr.mean.tolist(), "std": tr.std.tolist()}
    obs = add_observation_noise(clean, spec.noise_variance, spec.seed)
    return Dataset(obs, clean, t, meta)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def meta_path(path):
    p = Path(path)
    return p.with_name(p.stem + ".meta.json") if p.suffix == ".csv" else p.with_name(p.name + ".meta.json")


def write_csv(path, X, header=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if header is None:
        header = [f"y{i + 1}" for i in range(X.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in X:
            w.writerow([f"{v:.17g}" for v in row])


def read_csv(path):
    """Numeric CSV with a header row; returns ``(array, header)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        X = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric entry ({exc})") from None
    if X.size == 0:
        raise SchemaError(f"{path}: no data rows")
    if X.ndim != 2 or X.shape[1] != len(header):
        raise SchemaError(f"{path}: ragged rows or header/column mismatch")
    return X, header


def save_dataset(path, dataset, clean_path=None):
    write_csv(path, dataset.observations)
    meta = dict(dataset.meta)
    if clean_path is not None:
        write_csv(clean_path, dataset.clean)
        meta["clean_path"] = str(Path(clean_path).name)
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=1)


def load_dataset(path):
    """``(observations, meta)``; ``meta`` is ``{}`` when no sidecar exists."""
    X, _ = read_csv(path)
    mp = meta_path(path)
    meta = {}
    if mp.exists():
        with open(mp) as fh:
            meta = json.load(fh)
    return X, meta


def spec_dict(spec):
    d = asdict(spec)
    d["system"] = {"name": spec.system.name, "parameters": dict(spec.system.parameters)}
    return d
