"""Portfolio metrics, fairness scores and the efficiency-frontier sweep.

A sweep trains each configuration once on the train split and scores the
result on every split, giving one ``FrontierPoint`` per (config, split).
Points are keyed by ``(method, lambda_f, lambda_s, split, seed)``; a table
written to disk can be reloaded and the sweep resumed, in which case only
keys that are missing or previously failed are recomputed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from fairprice.baselines import individual_optimize
from fairprice.boosting import fit_indirect_ratebook
from fairprice.data import SPLITS, Portfolio
from fairprice.hgr import HgrConfig, hgr_metric
from fairprice.models import CoefficientModel, ConversionModel, interior_bounds
from fairprice.optimize import TrainConfig, train_fair_optigrad, train_optigrad
from fairprice.rdc import RdcConfig, pearson, rdc

log = logging.getLogger(__name__)

METHODS = ("optigrad", "fair-optigrad", "individual", "indirect")


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- metrics

def _check_coefficients(c, h, bounds):
    c = np.asarray(c, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if c.shape != h.shape:
        raise ValidationError(f"need one coefficient per record, got {c.shape} for {h.shape}")
    if bounds is not None:
        a, b = bounds
        bad = np.flatnonzero((c < a) | (c > b) | ~np.isfinite(c))
        if bad.size:
            raise ValidationError(
                f"{bad.size} coefficient(s) outside [{a}, {b}], first at record {bad[0]}: {c[bad[0]]!r}")
    return c, h


def _resolve(coefficients, X):
    if isinstance(coefficients, CoefficientModel):
        return coefficients.coefficient(X)
    return coefficients


def gwm(X, h, coefficients, fmodel: ConversionModel, bounds=(1.2, 1.6)) -> float:
    """Global written margin ``sum((c*h - h) * f(x, c*h))``.

    ``coefficients`` is an array or a ``CoefficientModel``. Pass
    ``bounds=None`` to skip the range validation.
    """
    c, h = _check_coefficients(_resolve(coefficients, X), h, bounds)
    prices = c * h
    return float(np.sum((prices - h) * fmodel.predict(X, prices)))


def conversion_rate(X, h, coefficients, fmodel: ConversionModel, bounds=(1.2, 1.6)) -> float:
    """Mean predicted conversion at the commercial prices."""
    c, h = _check_coefficients(_resolve(coefficients, X), h, bounds)
    return float(np.mean(fmodel.predict(X, c * h)))


DEFAULT_UPLIFTS = tuple(round(0.05 * k, 2) for k in range(21))


def uplift_curve(X, price, fmodel: ConversionModel, uplifts=DEFAULT_UPLIFTS) -> np.ndarray:
    """Mean predicted conversion when every price is raised by the same fraction.

    Entry ``k`` is ``mean f(x, (1 + uplifts[k]) * price)``.
    """
    price = np.asarray(price, dtype=np.float64)
    uplifts = np.asarray(uplifts, dtype=np.float64)
    if np.any(uplifts <= -1):
        raise ValidationError("uplifts must be greater than -1")
    return np.array([float(np.mean(fmodel.predict(X, (1.0 + u) * price))) for u in uplifts])


@dataclass
class FairnessReport:
    rdc: float
    hgr: float
    pearson: float
    degenerate: bool = False
    hgr_converged: bool = True


def fairness_report(prices, sensitive, seeds=(0, 1, 2, 3, 4), hgr_config: HgrConfig | None = None,
                    rdc_config: RdcConfig | None = None) -> FairnessReport:
    """RDC (median over ``seeds``), HGR_NN and |Pearson| of prices against one sensitive column."""
    prices = np.asarray(prices, dtype=np.float64)
    s = np.asarray(sensitive, dtype=np.float64)
    if s.ndim > 1:
        if s.shape[1] != 1:
            raise ValueError("fairness_report scores one sensitive column at a time")
        s = s[:, 0]
    if len(prices) != len(s) or len(prices) < 50:
        raise ValueError("fairness_report needs equal-length samples of at least 50")
    if np.ptp(prices) == 0 or np.ptp(s) == 0:
        return FairnessReport(0.0, 0.0, 0.0, degenerate=True)
    base = rdc_config or RdcConfig()
    rdc_value = float(np.median([rdc(prices, s, replace(base, seed=k)) for k in seeds]))
    h = hgr_metric(prices, s, hgr_config)
    return FairnessReport(rdc_value, h.value, abs(pearson(prices, s)), False, h.converged)


# ---------------------------------------------------------------- frontier table

@dataclass
class FrontierPoint:
    method: str
    lambda_f: float
    lambda_s: float
    split: str
    seed: int
    gwm: float = math.nan
    conversion_rate: float = math.nan
    rdc_score: float = math.nan
    hgr_score: float = math.nan
    pearson: float = math.nan
    n: int = 0
    data_fingerprint: str = ""
    status: str = "ok"
    error: str = ""

    def __post_init__(self):
        # CSV round trips hand back ints for whole-number floats
        for name in ("lambda_f", "lambda_s", "gwm", "conversion_rate", "rdc_score", "hgr_score", "pearson"):
            setattr(self, name, float(getattr(self, name)))
        self.seed, self.n = int(self.seed), int(self.n)

    @property
    def key(self) -> tuple:
        return (self.method, float(self.lambda_f), float(self.lambda_s), self.split, int(self.seed))

    def validate(self) -> None:
        if self.status != "ok":
            return
        if not math.isfinite(self.gwm):
            raise ValidationError(f"non-finite gwm at {self.key}")
        if not 0.0 <= self.conversion_rate <= 1.0:
            raise ValidationError(f"conversion rate outside [0, 1] at {self.key}")
        for name in ("rdc_score", "hgr_score", "pearson"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValidationError(f"{name} outside [0, 1] at {self.key}")


POINT_FIELDS = [f.name for f in fields(FrontierPoint)]


@dataclass
class FrontierTable:
    points: list[FrontierPoint] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def keys(self) -> set:
        return {p.key for p in self.points}

    def get(self, key) -> FrontierPoint | None:
        for p in self.points:
            if p.key == key:
                return p
        return None

    def add(self, point: FrontierPoint) -> None:
        """Append ``point``; a failed point with the same key is replaced, an ok one is a conflict."""
        point.validate()
        old = self.get(point.key)
        if old is not None:
            if old.status == "ok":
                raise ValueError(f"duplicate frontier key {point.key}")
            self.points.remove(old)
        self.points.append(point)

    def select(self, method=None, split=None, ok_only=True) -> list[FrontierPoint]:
        return [p for p in self.points
                if (method is None or p.method == method) and (split is None or p.split == split)
                and (not ok_only or p.status == "ok")]

    def sorted(self) -> list[FrontierPoint]:
        order = {name: i for i, name in enumerate(SPLITS)}
        return sorted(self.points, key=lambda p: (p.method, p.lambda_f, p.lambda_s, p.seed,
                                                  order.get(p.split, 99), p.split))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.sorted()], columns=POINT_FIELDS)

    def table_hash(self) -> str:
        """Hash of the point contents (provenance timestamps excluded)."""
        rows = [[repr(v) if isinstance(v, float) else v for v in asdict(p).values()] for p in self.sorted()]
        return hashlib.sha256(json.dumps(rows).encode()).hexdigest()

    def to_json(self, path) -> None:
        doc = {"provenance": self.provenance,
               "points": [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                           for k, v in asdict(p).items()} for p in self.sorted()]}
        Path(path).write_text(json.dumps(doc, indent=1))

    def to_csv(self, path) -> None:
        self.frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_json(cls, path) -> "FrontierTable":
        doc = json.loads(Path(path).read_text())
        table = cls(provenance=doc.get("provenance", {}))
        for row in doc["points"]:
            row = {k: (math.nan if v is None else v) for k, v in row.items()}
            table.points.append(FrontierPoint(**row))
        return table

    @classmethod
    def from_csv(cls, path) -> "FrontierTable":
        frame = pd.read_csv(path, keep_default_na=False, na_values={c: ["", "nan", "NaN"] for c in (
            "gwm", "conversion_rate", "rdc_score", "hgr_score", "pearson")})
        table = cls()
        for row in frame.to_dict("records"):
            row["seed"], row["n"] = int(row["seed"]), int(row["n"])
            row["data_fingerprint"], row["error"] = str(row["data_fingerprint"]), str(row["error"])
            table.points.append(FrontierPoint(**row))
        return table


# ---------------------------------------------------------------- sweep

@dataclass
class SweepContext:
    """Everything a sweep point needs; picklable so points can run in worker processes."""

    portfolio: Portfolio
    fmodel: ConversionModel
    premium: np.ndarray                 # pure premium for every record of ``portfolio``
    train_config: TrainConfig = field(default_factory=TrainConfig)
    coefficient_model: str = "linear"   # or "mlp"
    hidden: tuple[int, ...] = (32, 32)
    sensitive_column: int = 0
    fairness: bool = True
    fairness_splits: tuple[str, ...] = SPLITS
    hgr_config: HgrConfig = field(default_factory=HgrConfig)
    rdc_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    splits: tuple[str, ...] = SPLITS
    grid_step: float = 0.001
    trees: int = 300
    depth: int = 5
    shrinkage: float = 0.1

    def part(self, name: str) -> tuple[Portfolio, np.ndarray]:
        idx = self.portfolio.split.indices(name)
        part = self.portfolio.subset(idx, name)
        if part.sensitive is not None:
            part = replace(part, sensitive=part.sensitive[:, [self.sensitive_column]])
        return part, self.premium[idx]


def _coefficients_for(method: str, ctx: SweepContext, cfg: TrainConfig):
    """Train ``method`` once; return a function mapping a split name to its coefficients."""
    train, h_train = ctx.part("train")
    if method in ("optigrad", "fair-optigrad"):
        dev, h_dev = ctx.part("dev") if len(ctx.portfolio.split.indices("dev")) >= 2 else (None, None)
        d = train.X.shape[1]
        if ctx.coefficient_model == "mlp":
            cmodel = CoefficientModel.mlp(d, ctx.hidden, cfg.bounds, cfg.seed)
        else:
            cmodel = CoefficientModel.linear(d, cfg.bounds, cfg.seed)
        if method == "optigrad":
            result = train_optigrad(train, ctx.fmodel, h_train, cmodel, cfg, dev, h_dev)
        else:
            result = train_fair_optigrad(train, ctx.fmodel, h_train, cmodel, cfg, dev, h_dev)
        return lambda name: result.chosen.coefficient(ctx.part(name)[0].X)
    if method == "individual":
        # a per-record oracle: each split is solved on its own records
        def solve(name):
            part, h = ctx.part(name)
            return individual_optimize(part.X, h, ctx.fmodel, cfg.lambda_f, cfg.bounds, ctx.grid_step).coefficients
        return solve
    if method == "indirect":
        targets = individual_optimize(train.X, h_train, ctx.fmodel, cfg.lambda_f, cfg.bounds,
                                      ctx.grid_step).coefficients
        model = fit_indirect_ratebook(train.X, targets, ctx.trees, ctx.depth, ctx.shrinkage, cfg.bounds)
        return lambda name: model.predict(ctx.part(name)[0].X)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def run_point(ctx: SweepContext, method: str, lambda_f: float, lambda_s: float, seed: int) -> list[FrontierPoint]:
    """Train one configuration and score it on every split; failures become failed points."""
    base = dict(method=method, lambda_f=float(lambda_f), lambda_s=float(lambda_s), seed=int(seed))
    try:
        cfg = replace(ctx.train_config, lambda_f=float(lambda_f), lambda_s=float(lambda_s), seed=int(seed))
        coefficients = _coefficients_for(method, ctx, cfg)
        points = []
        for name in ctx.splits:
            part, h = ctx.part(name)
            c = coefficients(name)
            a, b = cfg.bounds
            if not np.all((c > a) & (c < b)):
                raise ValidationError(f"{method} emitted a coefficient outside the open interval ({a}, {b})")
            point = FrontierPoint(**base, split=name, gwm=gwm(part.X, h, c, ctx.fmodel, cfg.bounds),
                                  conversion_rate=conversion_rate(part.X, h, c, ctx.fmodel, cfg.bounds),
                                  n=len(part), data_fingerprint=part.fingerprint())
            if ctx.fairness and name in ctx.fairness_splits and part.sensitive is not None:
                rep = fairness_report(c * h, part.sensitive, ctx.rdc_seeds, ctx.hgr_config)
                point.rdc_score, point.hgr_score, point.pearson = rep.rdc, rep.hgr, rep.pearson
            points.append(point)
        return points
    except Exception as exc:  # recorded per point; the sweep continues
        log.warning("sweep point %s failed: %s", base, exc)
        message = f"{type(exc).__name__}: {exc}"
        return [FrontierPoint(**base, split=name, status="failed",
                              error=message + "\n" + traceback.format_exc(limit=3))
                for name in ctx.splits]


def sweep(ctx: SweepContext, method: str, grid, seeds=(0,), table: FrontierTable | None = None,
          jobs: int = 1, store=None, provenance: dict | None = None) -> FrontierTable:
    """Run every ``(lambda_f, lambda_s)`` pair of ``grid`` for ``method``.

    ``grid`` is a list of ``(lambda_f, lambda_s)`` pairs. When ``table`` is
    given (for instance reloaded from ``store``) configurations whose points
    are all present and ok are skipped. With ``store`` set the table is
    rewritten as JSON after every finished configuration.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    grid = [(float(lf), float(ls)) for lf, ls in grid]
    if not grid:
        raise ValueError("sweep grid is empty")
    table = table if table is not None else FrontierTable()
    if provenance:
        table.provenance.update(provenance)
    table.provenance.setdefault("dataset_fingerprint", ctx.portfolio.fingerprint())
    todo = []
    for lf, ls in grid:
        for seed in seeds:
            keys = [(method, lf, ls, name, int(seed)) for name in ctx.splits]
            done = [table.get(k) for k in keys]
            if all(p is not None and p.status == "ok" for p in done):
                continue
            todo.append((lf, ls, int(seed)))

    def record(points):
        for p in points:
            table.add(p)
        table.provenance["updated"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        if store is not None:
            table.to_json(store)

    if jobs <= 1 or len(todo) <= 1:
        for lf, ls, seed in todo:
            record(run_point(ctx, method, lf, ls, seed))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_point, ctx, method, lf, ls, seed) for lf, ls, seed in todo]
            for fut in futures:
                record(fut.result())
    return table


# ---------------------------------------------------------------- dominance

@dataclass
class DominanceReport:
    method_a: str
    method_b: str
    split: str
    window: float
    fraction: float | None            # None when no B point had an A point in the window
    n_compared: int
    n_without_overlap: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def dominance_check(table: FrontierTable, method_a: str, method_b: str, window: float = 0.005,
                    split: str = "dev") -> DominanceReport:
    """Share of B points beaten or matched in GWM by some A point at similar conversion."""
    a_points = table.select(method_a, split)
    b_points = table.select(method_b, split)
    a_conv = np.array([p.conversion_rate for p in a_points])
    a_gwm = np.array([p.gwm for p in a_points])
    rows, wins, missing = [], 0, 0
    for p in sorted(b_points, key=lambda q: q.conversion_rate):
        near = np.abs(a_conv - p.conversion_rate) <= window + 1e-12 if len(a_points) else np.zeros(0, bool)
        if not near.any():
            missing += 1
            rows.append({"lambda_f": p.lambda_f, "lambda_s": p.lambda_s, "conversion": p.conversion_rate,
                         "gwm_b": p.gwm, "gwm_a": None, "dominated": None})
            continue
        best = float(a_gwm[near].max())
        wins += best >= p.gwm
        rows.append({"lambda_f": p.lambda_f, "lambda_s": p.lambda_s, "conversion": p.conversion_rate,
                     "gwm_b": p.gwm, "gwm_a": best, "dominated": bool(best >= p.gwm)})
    compared = len(b_points) - missing
    return DominanceReport(method_a, method_b, split, window, wins / compared if compared else None,
                           compared, missing, rows)
