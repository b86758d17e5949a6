"""Per-customer (individual) optimization of the relaxed margin/conversion program.

With a per-record Lagrange weight the relaxed program is separable, so each
customer's coefficient is found by a 1-D search over ``[a, b]``:

    g_i(c) = (c - 1) * h_i * f(x_i, c * h_i) + lam * f(x_i, c * h_i)

The search runs over ``interior_bounds((a, b))``, a band a few 1e-14 inside
the bounds, so a corner solution is reported as ``b - 1.5e-14`` rather than
``b`` and every emitted coefficient is strictly inside ``(a, b)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from fairprice.models import ConversionModel, interior_bounds

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class IndividualSolution:
    coefficients: np.ndarray
    lam: float
    method: str
    objective: float           # sum of g_i(c_i)
    margin: np.ndarray         # (c_i - 1) * h_i per record
    conversion: np.ndarray     # f(x_i, c_i * h_i) per record

    def to_csv(self, path, ids=None) -> None:
        ids = np.arange(len(self.coefficients)) if ids is None else ids
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_id", "coefficient", "margin", "conversion"])
            for rid, c, m, f in zip(ids, self.coefficients, self.margin, self.conversion):
                writer.writerow([int(rid), repr(float(c)), repr(float(m)), repr(float(f))])


def record_objective(fmodel: ConversionModel, X, h, c, lam: float) -> np.ndarray:
    """``g_i(c_i)`` for every record."""
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), np.shape(h))
    f = fmodel.predict(X, c * h)
    return (c - 1.0) * h * f + lam * f


def _grid_argmax(fmodel, X, h, grid, lam):
    best_c = np.full(len(h), grid[0])
    best_g = record_objective(fmodel, X, h, grid[0], lam)
    for c in grid[1:]:
        g = record_objective(fmodel, X, h, c, lam)
        better = g > best_g
        best_c[better] = c
        best_g[better] = g[better]
    return best_c, best_g


def golden_section_max(fun, lo: np.ndarray, hi: np.ndarray, tol: float = 1e-10, max_iter: int = 200):
    """Vectorized golden-section maximization of ``fun`` on ``[lo, hi]`` per element."""
    lo, hi = lo.astype(np.float64).copy(), hi.astype(np.float64).copy()
    x1 = hi - INV_PHI * (hi - lo)
    x2 = lo + INV_PHI * (hi - lo)
    f1, f2 = fun(x1), fun(x2)
    for _ in range(max_iter):
        if np.max(hi - lo) <= tol:
            break
        left = f1 >= f2  # keep [lo, x2], else keep [x1, hi]
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        nx1 = np.where(left, hi - INV_PHI * (hi - lo), x2)
        nx2 = np.where(left, x1, lo + INV_PHI * (hi - lo))
        fp = fun(np.where(left, nx1, nx2))
        f1, f2 = np.where(left, fp, f2), np.where(left, f1, fp)
        x1, x2 = nx1, nx2
    mid = 0.5 * (lo + hi)
    return mid, fun(mid)


def individual_optimize(X, h, fmodel: ConversionModel, lam: float, bounds=(1.2, 1.6),
                        grid_step: float = 0.001, refine: bool = True) -> IndividualSolution:
    """Per-record argmax of ``g_i`` by dense grid, optionally polished by golden section."""
    a, b = map(float, bounds)
    if grid_step <= 0 or not a < b:
        raise ValueError("need grid_step > 0 and a < b")
    h = np.asarray(h, dtype=np.float64)
    n_points = int(round((b - a) / grid_step)) + 1
    a, b = interior_bounds((a, b))
    grid = np.linspace(a, b, n_points)
    best_c, best_g = _grid_argmax(fmodel, X, h, grid, lam)
    method = "grid"
    if refine:
        step = (b - a) / (n_points - 1)
        lo = np.clip(best_c - step, a, b)
        hi = np.clip(best_c + step, a, b)
        ref_c, ref_g = golden_section_max(lambda c: record_objective(fmodel, X, h, c, lam), lo, hi)
        take = ref_g > best_g
        best_c = np.where(take, ref_c, best_c)
        best_g = np.where(take, ref_g, best_g)
        method = "grid+refine"
    return _solution(fmodel, X, h, best_c, lam, method)


def discrete_individual_optimize(X, h, fmodel: ConversionModel, lam: float, rates,
                                 bounds=(1.2, 1.6)) -> IndividualSolution:
    """Per-record argmax restricted to a finite set of coefficients.

    Rates on the bounds themselves are pulled onto the interior band.
    """
    rates = np.asarray(rates, dtype=np.float64)
    if rates.size == 0:
        raise ValueError("rate set must be non-empty")
    if np.any(rates < bounds[0]) or np.any(rates > bounds[1]):
        raise ValueError(f"rate set must lie within the bounds {tuple(bounds)}")
    rates = np.unique(np.clip(rates, *interior_bounds(bounds)))
    best_c, _ = _grid_argmax(fmodel, X, np.asarray(h, dtype=np.float64), rates, lam)
    return _solution(fmodel, X, np.asarray(h, dtype=np.float64), best_c, lam, "discrete")


def _solution(fmodel, X, h, c, lam, method) -> IndividualSolution:
    f = fmodel.predict(X, c * h)
    g = (c - 1.0) * h * f + lam * f
    return IndividualSolution(c, float(lam), method, float(np.sum(g)), (c - 1.0) * h, f)
