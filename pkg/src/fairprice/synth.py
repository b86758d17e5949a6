"""Synthetic quote portfolio with a planted demand curve and planted bias.

Columns written:

- ``quote_id``: row identifier (dropped on load)
- ``x1 .. x{d}``: standard-normal numeric features
- ``region``: categorical feature with levels north / south / city
- ``premium``: true pure premium, ``base_premium * exp(w2 x2 + w3 x3 + region effect)`` with ``(w2, w3) = premium_weights``
- ``price``: historical quoted price, premium times a uniform loading in ``price_loading``
- ``sale``: Bernoulli draw from ``sigmoid(intercept + x . gamma + region effect + elasticity * ln(price / premium))``
- ``age``: continuous sensitive attribute correlated with ``x1`` at strength ``dependence``
- ``employed``: binary sensitive attribute thresholding a second noisy copy of ``x1``

``x1`` drives conversion but not the pure premium, so optimized prices pick
up a dependence on ``age`` only through the coefficient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy.special import expit

from fairprice.data import ColumnMapping

REGIONS = ("north", "south", "city")


@dataclass
class SynthConfig:
    n: int = 10_000
    n_features: int = 12
    elasticity: float = -7.0
    intercept: float = 2.1
    conversion_weights: tuple[float, ...] = (0.8, 0.0, 0.0, 0.25, -0.15, 0.2, -0.2, 0.15, 0.1, -0.1, 0.2, -0.15)
    premium_weights: tuple[float, float] = (0.12, 0.08)
    region_conversion: tuple[float, float, float] = (0.0, 0.1, -0.1)
    region_premium: tuple[float, float, float] = (-0.1, 0.0, 0.15)
    base_premium: float = 500.0
    price_loading: tuple[float, float] = (1.1, 1.7)
    dependence: float = 0.9
    seed: int = 0


def generate(config: SynthConfig | None = None) -> pd.DataFrame:
    cfg = config or SynthConfig()
    if cfg.n_features < 5:
        raise ValueError("synthetic generator needs at least 5 features")
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.n, cfg.n_features
    X = rng.standard_normal((n, d))
    region = rng.integers(0, 3, size=n)

    w2, w3 = cfg.premium_weights
    premium = cfg.base_premium * np.exp(w2 * X[:, 1] + w3 * X[:, 2] + np.asarray(cfg.region_premium)[region])
    loading = rng.uniform(*cfg.price_loading, size=n)
    price = premium * loading
    gamma = np.zeros(d)
    gamma[:min(d, len(cfg.conversion_weights))] = cfg.conversion_weights[:d]
    logit = (cfg.intercept + X @ gamma + np.asarray(cfg.region_conversion)[region]
             + cfg.elasticity * np.log(price / premium))
    sale = (rng.uniform(size=n) < expit(logit)).astype(int)

    rho = cfg.dependence
    latent = rho * X[:, 0] + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    age = np.clip(45.0 + 12.0 * latent, 18.0, 90.0)
    employed = (rho * X[:, 0] + np.sqrt(1 - rho ** 2) * rng.standard_normal(n) > -0.3).astype(int)

    frame = pd.DataFrame({"quote_id": np.arange(n)})
    for j in range(d):
        frame[f"x{j + 1}"] = X[:, j]
    frame["region"] = np.asarray(REGIONS)[region]
    frame["premium"] = premium
    frame["price"] = price
    frame["sale"] = sale
    frame["age"] = age
    frame["employed"] = employed
    return frame


def true_conversion(frame: pd.DataFrame, price, config: SynthConfig | None = None) -> np.ndarray:
    """Planted conversion probability at arbitrary prices."""
    cfg = config or SynthConfig()
    d = cfg.n_features
    X = frame[[f"x{j + 1}" for j in range(d)]].to_numpy()
    region = frame["region"].map({r: i for i, r in enumerate(REGIONS)}).to_numpy()
    gamma = np.zeros(d)
    gamma[:min(d, len(cfg.conversion_weights))] = cfg.conversion_weights[:d]
    logit = (cfg.intercept + X @ gamma + np.asarray(cfg.region_conversion)[region]
             + cfg.elasticity * np.log(np.asarray(price) / frame["premium"].to_numpy()))
    return expit(logit)


def default_mapping(config: SynthConfig | None = None, premium_column: bool = True) -> ColumnMapping:
    cfg = config or SynthConfig()
    return ColumnMapping(
        feature_columns=[f"x{j + 1}" for j in range(cfg.n_features)] + ["region"],
        sale_column="sale",
        price_column="price",
        premium_column="premium" if premium_column else None,
        sensitive_columns=[("age", "continuous"), ("employed", "binary")],
        categorical_columns=["region"],
        id_column="quote_id",
    )


def write_csv(path, config: SynthConfig | None = None) -> pd.DataFrame:
    frame = generate(config)
    frame.to_csv(path, index=False, float_format="%.17g")
    return frame


def config_dict(config: SynthConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
