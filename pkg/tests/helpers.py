"""Random model builders shared by the tests."""
import numpy as np

from oracles import random_spd
from pnlss.features import FeatureMap
from pnlss.model import ModelParams


def stable_matrix(rng, D, radius=0.9):
    M = rng.standard_normal((D, D))
    return radius * M / max(1.0, np.abs(np.linalg.eigvals(M)).max())


def random_model(rng, D=2, Dy=2, L=0, kind="ridge", amp=0.5):
    if kind == "ridge":
        fm = FeatureMap.ridge(rng.standard_normal((L, D)), rng.standard_normal(L)) if L else FeatureMap.linear(D)
    else:
        fm = FeatureMap.rbf(rng.standard_normal((L, D)), rng.uniform(0.5, 2.0, L))
    A = np.hstack([stable_matrix(rng, D, 0.8), amp * rng.standard_normal((D, L))])
    return ModelParams(A, 0.1 * rng.standard_normal(D), fm, random_spd(rng, D, 0.1, 3.0),
                       rng.standard_normal((Dy, D)), 0.1 * rng.standard_normal(Dy),
                       random_spd(rng, Dy, 0.2, 3.0), rng.standard_normal(D), random_spd(rng, D, 0.5, 3.0))


def linear_parts(p):
    return p.A_lin, p.b, p.Sigma_x, p.C, p.d, p.Sigma_y, p.mu0, p.Sigma0
