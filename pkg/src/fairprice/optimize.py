"""OptiGrad and Fair-OptiGrad: gradient training of the coefficient model.

Both trainers share one loop. Per mini-batch the optional adversary takes
``n_ascent`` gradient-ascent steps on the HGR estimate of the current
commercial prices, then the coefficient parameters take one descent step on

    -mean(margin * conversion) - lambda_f * mean(conversion) + lambda_s * mean(phi_hat * psi_hat)

With ``lambda_s == 0`` the penalty is left out of the descent objective, so
the coefficient trajectory is bit-identical to plain OptiGrad.
"""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from fairprice import autodiff as ad
from fairprice.data import Portfolio
from fairprice.hgr import AdversaryPair, ascent_step
from fairprice.models import CoefficientModel, ConversionModel, TrainingError


@dataclass
class TrainConfig:
    lambda_f: float = 0.0
    lambda_s: float = 0.0
    bounds: tuple[float, float] = (1.2, 1.6)
    epochs: int = 100
    batch_size: int = 256
    lr_c: float = 0.01
    lr_phi: float = 0.01
    lr_psi: float = 0.01
    n_ascent: int = 5
    seed: int = 0
    optimizer: str = "sgd"
    adversary_hidden: int = 16
    selection: str = "best"         # snapshot scored downstream: best dev objective or final epoch

    def __post_init__(self):
        self.bounds = tuple(float(x) for x in self.bounds)
        self.validate()

    def validate(self):
        a, b = self.bounds
        if not a < b:
            raise ValueError(f"bounds must satisfy a < b, got {self.bounds}")
        if min(self.lr_c, self.lr_phi, self.lr_psi) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lambda_f < 0 or self.lambda_s < 0:
            raise ValueError("lambda_f and lambda_s must be non-negative")
        if self.epochs < 1 or self.batch_size < 2 or self.n_ascent < 0:
            raise ValueError("epochs >= 1, batch_size >= 2 and n_ascent >= 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.selection not in ("best", "final"):
            raise ValueError(f"selection must be best or final, got {self.selection!r}")


TRACE_COLUMNS = ("epoch", "objective", "gwm", "conversion", "fairness", "hgr", "seconds")


@dataclass
class TrainTrace:
    rows: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


@dataclass
class TrainResult:
    model: CoefficientModel          # best dev-objective snapshot (final if no dev split)
    final: CoefficientModel
    trace: TrainTrace
    best_epoch: int
    adversary: AdversaryPair | None = None
    coefficient_range: tuple[float, float] = (np.inf, -np.inf)
    param_history: list[np.ndarray] | None = None
    selection: str = "best"

    @property
    def chosen(self) -> CoefficientModel:
        """The snapshot named by ``TrainConfig.selection``."""
        return self.final if self.selection == "final" else self.model


def objective_terms(cmodel: CoefficientModel, X, premium, fmodel: ConversionModel, params=None):
    """Per-batch pieces shared by all objectives.

    Returns ``(coefficients, prices, mean margin*conversion, mean conversion)``;
    tape ``Var`` objects when ``params`` are on a tape, floats/arrays otherwise.
    """
    c = cmodel.coefficient(X, params)
    prices = c * premium
    conv = fmodel.predict(X, prices)
    weighted = (prices - premium) * conv
    if isinstance(weighted, ad.Var):
        return c, prices, ad.mean(weighted), ad.mean(conv)
    return c, prices, float(np.mean(weighted)), float(np.mean(conv))


def optigrad_objective(cmodel: CoefficientModel, X, premium, fmodel: ConversionModel,
                       lambda_f: float, params=None):
    """``-mean((c*h - h) * f) - lambda_f * mean(f)`` on one batch."""
    _, _, margin, conv = objective_terms(cmodel, X, premium, fmodel, params)
    return -margin - lambda_f * conv


def fair_optigrad_objective(cmodel: CoefficientModel, X, premium, fmodel: ConversionModel,
                            pair: AdversaryPair, sensitive, lambda_f: float, lambda_s: float,
                            params=None):
    """OptiGrad objective plus ``lambda_s`` times the HGR penalty of the offered prices."""
    _, prices, margin, conv = objective_terms(cmodel, X, premium, fmodel, params)
    return -margin - lambda_f * conv + lambda_s * pair.objective(prices, sensitive)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    # standardization needs >= 2 rows; fold a lone trailing row into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def _train(train: Portfolio, fmodel: ConversionModel, h_train: np.ndarray, cmodel: CoefficientModel,
           config: TrainConfig, dev: Portfolio | None, h_dev: np.ndarray | None,
           pair: AdversaryPair | None, keep_history: bool) -> TrainResult:
    config.validate()
    if tuple(cmodel.bounds) != tuple(config.bounds):
        cmodel = CoefficientModel(cmodel.inner, config.bounds)
    a, b = config.bounds
    fair = pair is not None
    s_train = train.sensitive if fair else None
    s_dev = dev.sensitive if (fair and dev is not None) else None

    shuffle_rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in cmodel.params()]
    adam = _Adam(params, config.lr_c) if config.optimizer == "adam" else None
    trace = TrainTrace()
    best = (np.inf, -1, params)
    lo, hi = np.inf, -np.inf
    history = [np.concatenate([p.ravel() for p in params])] if keep_history else None

    def fail(player, exc, epoch):
        err = TrainingError(f"{player} produced a non-finite value in epoch {epoch}: {exc}")
        err.trace = trace
        return err

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)  # objective, margin, conversion, fairness
        batches = _batches(len(train), config.batch_size, shuffle_rng)
        for idx in batches:
            Xb, hb = train.X[idx], h_train[idx]
            if fair:
                sb = s_train[idx]
                prices_now = cmodel.coefficient(Xb, params) * hb
                for _ in range(config.n_ascent):
                    pair, _ = ascent_step(pair, prices_now, sb, config.lr_phi, config.lr_psi)

            tape = ad.Tape()
            leaves = [tape.leaf(p) for p in params]
            try:
                c, prices, margin, conv = objective_terms(cmodel, Xb, hb, fmodel, leaves)
                obj = -margin - config.lambda_f * conv
                fterm = 0.0
                if fair:
                    penalty = pair.objective(prices, sb)
                    fterm = penalty.item()
                    if config.lambda_s != 0.0:
                        obj = obj + config.lambda_s * penalty
                grads = ad.backward(obj)
            except ad.EvaluationError as exc:
                raise fail("coefficient model", exc, epoch) from exc
            lo, hi = min(lo, float(c.value.min())), max(hi, float(c.value.max()))
            if not (a < lo and hi < b):
                raise TrainingError(f"coefficient left the open interval ({a}, {b}) in epoch {epoch}")
            g = [grads[leaf] for leaf in leaves]
            if adam is None:
                params = [p - config.lr_c * gk for p, gk in zip(params, g)]
            else:
                params = adam.step(params, g)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise fail("coefficient model", "parameter update", epoch)
            if keep_history:
                history.append(np.concatenate([p.ravel() for p in params]))
            sums += (obj.item(), margin.item(), conv.item(), fterm)

        means = sums / len(batches)
        hgr_spot = 0.0
        if fair:
            hgr_spot = abs(pair.objective(cmodel.coefficient(train.X, params) * h_train, s_train))
        trace.rows.append({
            "epoch": epoch, "objective": float(means[0]), "gwm": float(means[1]),
            "conversion": float(means[2]), "fairness": float(means[3]), "hgr": float(hgr_spot),
            "seconds": time.perf_counter() - t0,
        })
        if not np.all(np.isfinite(means)):
            raise fail("coefficient model", "objective", epoch)

        if dev is not None and len(dev) >= 2:
            dev_obj = optigrad_objective(cmodel, dev.X, h_dev, fmodel, config.lambda_f, params)
            if fair and config.lambda_s != 0.0:
                # selection uses |penalty|: the signed term rewards anti-correlated prices
                dev_prices = cmodel.coefficient(dev.X, params) * h_dev
                dev_obj += config.lambda_s * abs(pair.objective(dev_prices, s_dev))
            if dev_obj < best[0]:
                best = (dev_obj, epoch, [p.copy() for p in params])
        else:
            best = (trace.rows[-1]["objective"], epoch, params)

    return TrainResult(
        model=cmodel.with_params(best[2]), final=cmodel.with_params(params), trace=trace,
        best_epoch=best[1], adversary=pair, coefficient_range=(lo, hi), param_history=history,
        selection=config.selection,
    )


def train_optigrad(train: Portfolio, fmodel: ConversionModel, h_train, cmodel: CoefficientModel,
                   config: TrainConfig, dev: Portfolio | None = None, h_dev=None,
                   keep_history: bool = False) -> TrainResult:
    """Mini-batch descent of the coefficient model on the OptiGrad objective."""
    return _train(train, fmodel, np.asarray(h_train, dtype=np.float64), cmodel, config, dev,
                  None if h_dev is None else np.asarray(h_dev, dtype=np.float64), None, keep_history)


def init_adversary(train: Portfolio, h_train, cmodel: CoefficientModel, config: TrainConfig) -> AdversaryPair:
    """Adversary whose input scaling is frozen from the initial offered prices.

    Seeded from a stream independent of the batch shuffling.
    """
    prices = cmodel.coefficient(train.X) * np.asarray(h_train)
    seed = int(np.random.SeedSequence([config.seed, 1]).generate_state(1)[0])
    return AdversaryPair.init(prices, train.sensitive, config.adversary_hidden, seed)


def train_fair_optigrad(train: Portfolio, fmodel: ConversionModel, h_train, cmodel: CoefficientModel,
                        config: TrainConfig, dev: Portfolio | None = None, h_dev=None,
                        adversary: AdversaryPair | None = None,
                        keep_history: bool = False) -> TrainResult:
    """Alternating adversary ascent / coefficient descent with the HGR penalty."""
    if train.sensitive is None:
        raise ValueError("Fair-OptiGrad needs sensitive values on the training records")
    h_train = np.asarray(h_train, dtype=np.float64)
    if adversary is None:
        adversary = init_adversary(train, h_train, cmodel, config)
    return _train(train, fmodel, h_train, cmodel, config, dev,
                  None if h_dev is None else np.asarray(h_dev, dtype=np.float64), adversary, keep_history)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["bounds"] = list(config.bounds)
    return d
