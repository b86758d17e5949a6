"""Randomized Dependence Coefficient and a Pearson helper."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, solve_triangular
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass
class RdcConfig:
    k: int = 20
    s: float = 1.0 / 6.0
    seed: int = 0
    regularization: float = 1e-8

    def __post_init__(self):
        if self.k < 1 or self.s <= 0:
            raise ValueError("RDC needs k >= 1 and s > 0")


def empirical_copula(v) -> np.ndarray:
    """Column-wise ``rank / n`` with average ranks for ties."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] < 2:
        raise ValueError("empirical copula needs at least 2 observations")
    return rankdata(v, method="average", axis=0) / v.shape[0]


def _projections(copula: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # rows 0..d-1 of ``weights`` act on the copula columns, the last row is the bias
    d = copula.shape[1]
    w = np.vstack([weights[:d], weights[-1:]])
    design = np.column_stack([copula, np.ones(len(copula))])
    return np.sin(design @ w)


def _top_canonical_correlation(fx: np.ndarray, fy: np.ndarray, ridge: float) -> float:
    fx = fx - fx.mean(axis=0)
    fy = fy - fy.mean(axis=0)
    n = len(fx)
    cxx = fx.T @ fx / n + ridge * np.eye(fx.shape[1])
    cyy = fy.T @ fy / n + ridge * np.eye(fy.shape[1])
    cxy = fx.T @ fy / n
    try:
        lx = cho_factor(cxx, lower=True)[0]
        ly = cho_factor(cyy, lower=True)[0]
    except LinAlgError as exc:
        cond = max(np.linalg.cond(cxx), np.linalg.cond(cyy))
        raise np.linalg.LinAlgError(f"RDC covariance is singular (condition ~{cond:.3g})") from exc
    # whiten both sides; the top singular value is the largest canonical correlation
    m = solve_triangular(np.tril(lx), cxy, lower=True)
    m = solve_triangular(np.tril(ly), m.T, lower=True).T
    return float(np.linalg.svd(m, compute_uv=False)[0])


def rdc(u, v, config: RdcConfig | None = None) -> float:
    """Randomized Dependence Coefficient of two samples, in ``[0, 1]``.

    Both sides share one Gaussian weight matrix drawn from ``config.seed``
    (rows for the copula coordinates, last row for the bias), which makes
    ``rdc(u, v) == rdc(v, u)`` exactly.
    """
    config = config or RdcConfig()
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u = u.reshape(len(u), -1)
    v = v.reshape(len(v), -1)
    if len(u) != len(v) or len(u) < 20:
        raise ValueError("rdc needs equal-length samples of at least 20")
    d = max(u.shape[1], v.shape[1])
    rng = np.random.default_rng(config.seed)
    weights = config.s * rng.standard_normal((d + 1, config.k))
    cu, cv = empirical_copula(u), empirical_copula(v)
    # a canonical block order makes the solve, and so the result, exactly symmetric;
    # ordering by copula keeps it exactly invariant to monotone transforms as well
    if (cu.shape[1], cu.tobytes()) > (cv.shape[1], cv.tobytes()):
        cu, cv = cv, cu
    fu = _projections(cu, np.vstack([weights[:cu.shape[1]], weights[-1:]]))
    fv = _projections(cv, np.vstack([weights[:cv.shape[1]], weights[-1:]]))
    value = _top_canonical_correlation(fu, fv, config.regularization)
    if value > 1.0 + 1e-6:
        log.warning("RDC canonical correlation %.8f exceeded 1 before clipping", value)
    return float(np.clip(value, 0.0, 1.0))


def pearson(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    su, sv = u.std(), v.std()
    if su == 0 or sv == 0:
        return 0.0
    return float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))
