"""Small builders shared by several test modules."""
import numpy as np

from fairprice.data import Portfolio, split
from fairprice.models import ConversionModel


def toy_batch(seed, n=8, d=4):
    """Random features, premiums around 500 and a demand model with w_p < 0."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    h = 500.0 * np.exp(0.2 * rng.standard_normal(n))
    fmodel = ConversionModel(w_x=rng.normal(0, 0.3, d), w_p=-4.0, bias=4.0 * np.log(650.0))
    s = 45 + 12 * (0.8 * X[:, 0] + 0.6 * rng.standard_normal(n))
    return X, h, fmodel, s


def toy_portfolio(seed, n=400, d=4, with_sensitive=True):
    X, h, fmodel, s = toy_batch(seed, n, d)
    rng = np.random.default_rng(seed + 1000)
    p = fmodel.predict(X, 1.4 * h)
    y = (rng.uniform(size=n) < p).astype(float)
    return Portfolio(X=X, y=y, price=1.4 * h, premium=h, sensitive=s[:, None] if with_sensitive else None,
                     feature_names=[f"f{j}" for j in range(d)], sensitive_names=["age"] if with_sensitive else [],
                     split=split(n, seed=seed)), fmodel
