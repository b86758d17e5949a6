"""Neural estimate of the HGR maximal correlation.

Two small networks ``phi`` (price side) and ``psi`` (sensitive side) are
trained by gradient ascent on the mean product of their batch-standardized
outputs. The same expression serves as the differentiable fairness penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fairprice import autodiff as ad
from fairprice.models import MlpModel, TrainingError

STD_FLOOR = 1e-8


@dataclass
class Standardized:
    values: "ad.Var | np.ndarray"
    degenerate: bool


def standardize_batch(outputs) -> Standardized:
    """Zero mean, unit (population) variance over the batch; std floored."""
    if isinstance(outputs, ad.Var):
        if outputs.value.size < 2:
            raise ValueError("standardization needs a batch of at least 2")
        centered = outputs - ad.mean(outputs)
        var = ad.mean(ad.square(centered))
        if var.item() <= STD_FLOOR ** 2:
            return Standardized(centered / STD_FLOOR, True)
        return Standardized(centered / ad.sqrt(var), False)
    x = np.asarray(outputs, dtype=np.float64)
    if x.size < 2:
        raise ValueError("standardization needs a batch of at least 2")
    centered = x - x.mean()
    std = float(np.sqrt(np.mean(centered ** 2)))
    if std <= STD_FLOOR:
        return Standardized(centered / STD_FLOOR, True)
    return Standardized(centered / std, False)


def _as_column(v):
    if isinstance(v, ad.Var):
        return ad.reshape(v, (-1, 1)) if v.value.ndim == 1 else v
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


@dataclass
class AdversaryPair:
    """The two networks plus the fixed affine scaling of their inputs."""

    phi: MlpModel
    psi: MlpModel
    u_loc: np.ndarray
    u_scale: np.ndarray
    v_loc: np.ndarray
    v_scale: np.ndarray

    @classmethod
    def init(cls, u, v, hidden: int = 16, seed: int = 0) -> "AdversaryPair":
        """Fresh pair whose input scaling is frozen from the sample ``(u, v)``."""
        u, v = _as_column(u), _as_column(v)
        rng = np.random.default_rng(seed)
        s1, s2 = rng.integers(0, 2**31, size=2)

        def scaling(a):
            scale = a.std(axis=0)
            return a.mean(axis=0), np.where(scale > 0, scale, 1.0)

        u_loc, u_scale = scaling(u)
        v_loc, v_scale = scaling(v)
        return cls(MlpModel.init([u.shape[1], hidden, 1], int(s1)),
                   MlpModel.init([v.shape[1], hidden, 1], int(s2)),
                   u_loc, u_scale, v_loc, v_scale)

    def phi_out(self, u, params=None):
        return self.phi.forward((_as_column(u) - self.u_loc) / self.u_scale, params)

    def psi_out(self, v, params=None):
        return self.psi.forward((_as_column(v) - self.v_loc) / self.v_scale, params)

    def objective(self, u, v, phi_params=None, psi_params=None):
        """Mean product of standardized outputs; a ``Var`` if anything is on a tape."""
        a = standardize_batch(self.phi_out(u, phi_params)).values
        b = standardize_batch(self.psi_out(v, psi_params)).values
        prod = a * b
        return ad.mean(prod) if isinstance(prod, ad.Var) else float(np.mean(prod))

    def with_params(self, phi_params, psi_params) -> "AdversaryPair":
        return replace(self, phi=self.phi.with_params(phi_params), psi=self.psi.with_params(psi_params))


@dataclass
class HgrConfig:
    hidden: int = 16
    lr_phi: float = 0.1
    lr_psi: float = 0.1
    max_steps: int = 2000
    window: int = 100
    tol: float = 1e-4
    seed: int = 0
    cross_fit: bool = True


@dataclass
class HgrEstimate:
    value: float
    n_used: int
    converged: bool


def ascent_step(pair: AdversaryPair, prices, sensitive, lr_phi: float,
                lr_psi: float) -> tuple[AdversaryPair, float]:
    """One simultaneous gradient-ascent step on both networks.

    ``prices`` and ``sensitive`` are plain arrays, so nothing upstream of the
    adversary receives gradient. Returns the updated pair and the objective
    evaluated before the step.
    """
    prices = np.asarray(prices, dtype=np.float64)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    if len(prices) != len(sensitive) or len(prices) < 2:
        raise ValueError("ascent_step needs matching batches of size >= 2")
    tape = ad.Tape()
    phi_p = [tape.leaf(p) for p in pair.phi.params()]
    psi_p = [tape.leaf(p) for p in pair.psi.params()]
    obj = pair.objective(prices, sensitive, phi_p, psi_p)
    try:
        grads = ad.backward(obj)
    except ad.EvaluationError as exc:
        raise TrainingError(f"adversary ascent produced a non-finite gradient: {exc}") from exc
    new_phi = [p.value + lr_phi * grads[p] for p in phi_p]
    new_psi = [p.value + lr_psi * grads[p] for p in psi_p]
    return pair.with_params(new_phi, new_psi), obj.item()


def fairness_penalty(pair: AdversaryPair, prices, sensitive):
    """Mean standardized product with the adversary held fixed.

    Gradient reaches whatever ``prices`` depends on; the networks' parameters
    enter as constants.
    """
    return pair.objective(prices, sensitive)


def _fit_pair(u, v, config: HgrConfig, seed: int) -> tuple[AdversaryPair, bool]:
    pair = AdversaryPair.init(u, v, config.hidden, seed)
    history = []
    best = 0.0
    for step in range(config.max_steps):
        pair, value = ascent_step(pair, u, v, config.lr_phi, config.lr_psi)
        best = max(best, abs(value))
        history.append(best)
        if step >= config.window and history[-1] - history[-1 - config.window] < config.tol:
            return pair, True
    return pair, False


def hgr_metric(u, v, config: HgrConfig | None = None) -> HgrEstimate:
    """Fit adversary pairs to ``(u, v)`` and report ``|E[phi_hat * psi_hat]|``.

    With ``config.cross_fit`` (default) the sample is halved; a pair trained
    on each half is scored on the other half and the two signed scores are
    averaged. This removes the in-sample optimism that otherwise shows up as
    spurious dependence between independent samples.
    """
    config = config or HgrConfig()
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(u) != len(v) or len(u) < 50:
        raise ValueError("hgr_metric needs equal-length samples of at least 50")
    if not config.cross_fit:
        pair, converged = _fit_pair(u, v, config, config.seed)
        return HgrEstimate(min(abs(pair.objective(u, v)), 1.0), len(u), converged)
    order = np.random.default_rng(config.seed).permutation(len(u))
    halves = (order[: len(u) // 2], order[len(u) // 2:])
    scores, flags = [], []
    for k, (fit_idx, score_idx) in enumerate((halves, halves[::-1])):
        pair, converged = _fit_pair(u[fit_idx], v[fit_idx], config, config.seed + k + 1)
        scores.append(pair.objective(u[score_idx], v[score_idx]))
        flags.append(converged)
    return HgrEstimate(min(abs(float(np.mean(scores))), 1.0), len(u), all(flags))
