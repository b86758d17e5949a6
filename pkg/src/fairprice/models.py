"""Conversion, pure-premium and bounded coefficient models.

Every parametric model exposes ``params()`` (list of float64 arrays) and a
``forward``-style method that accepts either numpy parameters or tape
``Var`` parameters, so the same code path serves prediction and training.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from fairprice import autodiff as ad
from fairprice.data import Portfolio

log = logging.getLogger(__name__)

RAW_LIMIT = 30.0


class TrainingError(RuntimeError):
    pass


def interior_bounds(bounds) -> tuple[float, float]:
    """The closed band every method emits coefficients from.

    It is the range the sigmoid coefficient reaches at ``raw = +-RAW_LIMIT``,
    so grid searches and clipped regressors stay strictly inside ``(a, b)``
    by the same margin as the trained models (about ``4e-14 * (b - a)``).
    """
    a, b = map(float, bounds)
    if a == b:
        return a, b
    delta = (b - a) * float(expit(-RAW_LIMIT))
    # for narrow or offset bands the margin is below one ulp; step at least one ulp inwards
    return max(a + delta, float(np.nextafter(a, b))), min(b - delta, float(np.nextafter(b, a)))


def _tanh(z):
    return ad.tanh(z) if isinstance(z, ad.Var) else np.tanh(z)


def _sigmoid(z):
    return ad.sigmoid(z) if isinstance(z, ad.Var) else expit(z)


def _clip(z, lo, hi):
    return ad.clip(z, lo, hi) if isinstance(z, ad.Var) else np.clip(z, lo, hi)


def _ln(z):
    return ad.ln(z) if isinstance(z, ad.Var) else np.log(z)


def _matmul(a, b):
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return ad.matmul(a, b)
    return a @ b


def _reshape(z, shape):
    return ad.reshape(z, shape) if isinstance(z, ad.Var) else np.reshape(z, shape)


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in params]) if params else np.zeros(0)


def unflatten(flat, shapes) -> list:
    """Split a flat vector (array or ``Var``) into pieces of ``shapes``."""
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape)) if shape else 1
        piece = flat[offset:offset + size]
        out.append(_reshape(piece, shape))
        offset += size
    return out


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, n_features: int, seed: int = 0) -> "LinearModel":
        rng = np.random.default_rng(seed)
        return cls(uniform_init(rng, n_features, (n_features,)), uniform_init(rng, n_features, ()))

    def params(self) -> list[np.ndarray]:
        return [np.asarray(self.weights, dtype=np.float64), np.asarray(self.bias, dtype=np.float64)]

    def with_params(self, params) -> "LinearModel":
        w, b = params
        return LinearModel(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))

    def forward(self, X, params=None):
        w, b = self.params() if params is None else params
        return _matmul(X, w) + b

    def layer_sizes(self) -> list[int]:
        return [len(self.weights), 1]


@dataclass
class MlpModel:
    """Feed-forward net: tanh hidden layers, linear scalar output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, layer_sizes, seed: int = 0) -> "MlpModel":
        if layer_sizes[-1] != 1:
            raise ValueError("MLP output layer must have width 1")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(uniform_init(rng, fan_in, (fan_in, fan_out)))
            biases.append(uniform_init(rng, fan_in, (fan_out,)))
        return cls(weights, biases)

    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params) -> "MlpModel":
        params = [np.array(p, dtype=np.float64) for p in params]
        return MlpModel(params[0::2], params[1::2])

    def forward(self, X, params=None):
        params = self.params() if params is None else params
        n_layers = len(params) // 2
        z = X
        for k in range(n_layers):
            z = _matmul(z, params[2 * k]) + params[2 * k + 1]
            if k < n_layers - 1:
                z = _tanh(z)
        return _reshape(z, (-1,))


@dataclass
class CoefficientModel:
    """Commercial coefficient squashed into ``(a, b)`` by a scaled sigmoid."""

    inner: LinearModel | MlpModel
    bounds: tuple[float, float] = (1.2, 1.6)

    def __post_init__(self):
        a, b = self.bounds
        if a > b:
            raise ValueError(f"coefficient bounds must satisfy a <= b, got {self.bounds}")
        self.bounds = (float(a), float(b))

    @classmethod
    def linear(cls, n_features, bounds=(1.2, 1.6), seed=0) -> "CoefficientModel":
        return cls(LinearModel.init(n_features, seed), bounds)

    @classmethod
    def mlp(cls, n_features, hidden=(32, 32), bounds=(1.2, 1.6), seed=0) -> "CoefficientModel":
        return cls(MlpModel.init([n_features, *hidden, 1], seed), bounds)

    def params(self) -> list[np.ndarray]:
        return self.inner.params()

    def shapes(self) -> list[tuple]:
        return [np.shape(p) for p in self.params()]

    def with_params(self, params) -> "CoefficientModel":
        return CoefficientModel(self.inner.with_params(params), self.bounds)

    def raw(self, X, params=None):
        return self.inner.forward(X, params)

    def coefficient(self, X, params=None):
        a, b = self.bounds
        # beyond +-RAW_LIMIT the sigmoid rounds to 0 or 1 and the bound would be hit exactly
        raw = _clip(self.raw(X, params), -RAW_LIMIT, RAW_LIMIT)
        lo, hi = interior_bounds(self.bounds)
        # the affine map can round onto a bound when (b - a) is small relative to a
        return _clip(_sigmoid(raw) * (b - a) + a, lo, hi)


def coefficient(model: CoefficientModel, X, params=None):
    return model.coefficient(X, params)


@dataclass
class ConversionModel:
    """Logistic demand ``sigmoid(w_x . x + w_p * ln(price) + bias)``."""

    w_x: np.ndarray
    w_p: float
    bias: float
    train_log_loss: float | None = None
    dev_log_loss: float | None = None

    def logits(self, X, price):
        return _matmul(X, self.w_x) + self.w_p * _ln(price) + self.bias

    def predict(self, X, price):
        if not isinstance(price, ad.Var) and np.any(np.asarray(price) <= 0):
            raise ValueError("conversion model needs strictly positive prices")
        return _sigmoid(self.logits(X, price))

    def params(self) -> list[np.ndarray]:
        return [np.asarray(self.w_x, dtype=np.float64), np.asarray(self.w_p, dtype=np.float64),
                np.asarray(self.bias, dtype=np.float64)]


def predict_conversion(model: ConversionModel, X, price):
    return model.predict(X, price)


def log_loss(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def fit_conversion(train: Portfolio, dev: Portfolio | None = None, lr: float = 0.05,
                   epochs: int = 200, batch_size: int = 256, seed: int = 0,
                   momentum: float = 0.9, patience: int = 10) -> ConversionModel:
    """Mini-batch logistic regression on features plus log historical price.

    Log price is standardized during optimization and folded back into
    ``w_p``/``bias`` afterwards, so the returned model acts on raw ln(price).
    """
    if len(train) == 0:
        raise TrainingError("empty training set")
    if not np.all(np.isin(train.y, (0.0, 1.0))):
        raise TrainingError("sale labels must be binary")
    lp = np.log(train.price)
    mu, sd = float(lp.mean()), float(lp.std()) or 1.0

    def design(p: Portfolio):
        return np.column_stack([p.X, (np.log(p.price) - mu) / sd])

    Z, y = design(train), train.y
    Zd, yd = (design(dev), dev.y) if dev is not None and len(dev) else (None, None)
    rng = np.random.default_rng(seed)
    w = np.zeros(Z.shape[1])
    b = 0.0
    vw, vb = np.zeros_like(w), 0.0
    best = (np.inf, w.copy(), b)
    stale = 0
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            resid = expit(Z[idx] @ w + b) - y[idx]
            gw = Z[idx].T @ resid / len(idx)
            gb = float(resid.mean())
            vw = momentum * vw - lr * gw
            vb = momentum * vb - lr * gb
            w = w + vw
            b = b + vb
        if not (np.all(np.isfinite(w)) and np.isfinite(b)):
            raise TrainingError("conversion fit diverged; use a smaller learning rate")
        if Zd is None:
            best = (0.0, w.copy(), b)
            continue
        loss = log_loss(expit(Zd @ w + b), yd)
        if loss < best[0] - 1e-9:
            best, stale = (loss, w.copy(), b), 0
        else:
            stale += 1
            if stale >= patience:
                break
    _, w, b = best
    w_p = float(w[-1] / sd)
    model = ConversionModel(w_x=w[:-1].copy(), w_p=w_p, bias=float(b - w[-1] * mu / sd))
    model.train_log_loss = log_loss(model.predict(train.X, train.price), train.y)
    if Zd is not None:
        model.dev_log_loss = log_loss(model.predict(dev.X, dev.price), dev.y)
    if model.w_p >= 0:
        log.warning("fitted price weight w_p=%.4g is not negative; demand does not fall with price", model.w_p)
    return model


@dataclass
class PremiumModel:
    """Pure premium: either read from the data or a fitted log-link model."""

    kind: str = "column"
    weights: np.ndarray | None = None
    bias: float = 0.0

    def premium(self, portfolio: Portfolio) -> np.ndarray:
        if self.kind == "column":
            if portfolio.premium is None:
                raise ValueError("column-backed premium model needs a premium column")
            return portfolio.premium
        return np.exp(portfolio.X @ self.weights + self.bias)


def premium(model: PremiumModel, portfolio: Portfolio) -> np.ndarray:
    return model.premium(portfolio)


def fit_premium(train: Portfolio, target: np.ndarray | None = None, iterations: int = 25,
                ridge: float = 1e-8) -> PremiumModel:
    """Gamma-family log-link GLM of ``target`` (default: historical price) on features, by IRLS."""
    y = train.price if target is None else np.asarray(target, dtype=np.float64)
    A = np.column_stack([train.X, np.ones(len(y))])
    reg = ridge * np.eye(A.shape[1])
    reg[-1, -1] = 0.0
    beta = np.linalg.solve(A.T @ A + reg, A.T @ np.log(y))
    # log link with gamma variance gives unit IRLS weights
    for _ in range(iterations):
        eta = A @ beta
        z = eta + (y - np.exp(eta)) / np.exp(eta)
        new = np.linalg.solve(A.T @ A + reg, A.T @ z)
        done = np.max(np.abs(new - beta)) < 1e-12
        beta = new
        if done:
            break
    return PremiumModel("loglink", beta[:-1].copy(), float(beta[-1]))


# --- JSON persistence -------------------------------------------------------

def _arr(a) -> list | float:
    a = np.asarray(a, dtype=np.float64)
    return a.tolist()


def model_to_dict(model, fingerprint: str | None = None) -> dict:
    if isinstance(model, CoefficientModel):
        inner = model.inner
        out = {"kind": "coefficient", "inner": "mlp" if isinstance(inner, MlpModel) else "linear",
               "layer_sizes": inner.layer_sizes(), "bounds": list(model.bounds),
               "params": _arr(flatten(model.params()))}
    elif isinstance(model, MlpModel):
        out = {"kind": "mlp", "layer_sizes": model.layer_sizes(), "params": _arr(flatten(model.params()))}
    elif isinstance(model, ConversionModel):
        out = {"kind": "conversion", "w_x": _arr(model.w_x), "w_p": float(model.w_p),
               "bias": float(model.bias), "train_log_loss": model.train_log_loss,
               "dev_log_loss": model.dev_log_loss}
    elif isinstance(model, PremiumModel):
        out = {"kind": "premium", "source": model.kind,
               "weights": None if model.weights is None else _arr(model.weights), "bias": float(model.bias)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    out["mapping_fingerprint"] = fingerprint
    return out


def _mlp_shapes(sizes):
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    return shapes


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "coefficient":
        flat = np.asarray(d["params"], dtype=np.float64)
        sizes = d["layer_sizes"]
        if d["inner"] == "linear":
            inner = LinearModel(flat[:-1].copy(), np.array(flat[-1]))
        else:
            inner = MlpModel.init(sizes).with_params(unflatten(flat, _mlp_shapes(sizes)))
        return CoefficientModel(inner, tuple(d["bounds"]))
    if kind == "mlp":
        sizes = d["layer_sizes"]
        return MlpModel.init(sizes).with_params(unflatten(np.asarray(d["params"]), _mlp_shapes(sizes)))
    if kind == "conversion":
        return ConversionModel(np.asarray(d["w_x"], dtype=np.float64), d["w_p"], d["bias"],
                               d.get("train_log_loss"), d.get("dev_log_loss"))
    if kind == "premium":
        w = d["weights"]
        return PremiumModel(d["source"], None if w is None else np.asarray(w, dtype=np.float64), d["bias"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path, fingerprint: str | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, fingerprint), indent=1))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
