"""Residual embedding refinement and contrastive feedback search.

The contrastive objective is ``L(h) = mse(h, h_good) - mse(h, h_bad)`` with the
reference outputs held constant. The quadratic terms cancel, so L is linear
in h and its gradient is the constant ``(2/d) * (h_bad - h_good)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DimensionError, RefinementConfig, as_state, lerp, mse
from .dynamics import CheckpointPair, DynamicsModel, StepContext, model_step


@dataclass(frozen=True, eq=False)
class ContrastiveGradient:
    values: np.ndarray
    h: np.ndarray
    h_good: np.ndarray
    h_bad: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def contrastive_loss(h, h_good, h_bad) -> float:
    return mse(h, h_good) - mse(h, h_bad)


def residual_refine(prev, raw_next, alpha: float) -> np.ndarray:
    return lerp(prev, raw_next, alpha)


def contrastive_gradient(h, h_good, h_bad) -> ContrastiveGradient:
    h = as_state(h)
    h_good = as_state(h_good)
    h_bad = as_state(h_bad)
    if not (h.size == h_good.size == h_bad.size):
        raise DimensionError(f"dimension mismatch: {h.size}, {h_good.size}, {h_bad.size}")
    values = (2.0 / h.size) * (h_bad - h_good)
    return ContrastiveGradient(values, h, h_good, h_bad)


def contrastive_update(h, grad: ContrastiveGradient, eta: float, literal_sign: bool = False) -> np.ndarray:
    """Move ``h`` along the contrastive direction.

    The default descends L (toward the good reference, away from the bad one).
    ``literal_sign=True`` adds ``eta * grad`` instead, which ascends L.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    h = as_state(h)
    if h.size != grad.values.size:
        raise DimensionError(f"dimension mismatch: {h.size} vs {grad.values.size}")
    sign = 1.0 if literal_sign else -1.0
    return h + sign * eta * grad.values


@dataclass
class SearchRecord:
    grad_norm: float
    loss_before: float
    loss_after: float


@dataclass
class StepRecord:
    t: int
    raw: np.ndarray
    post_residual: np.ndarray
    state: np.ndarray
    rounds: int
    residual_applied: bool
    searches: list[SearchRecord] = field(default_factory=list)


def refine_step(
    h_prev,
    model: DynamicsModel,
    pair: CheckpointPair | None,
    cfg: RefinementConfig,
    ctx: StepContext | None = None,
    t: int = 1,
) -> StepRecord:
    """One latent step: plain update, then residual blend, then contrastive rounds.

    References are queried at the current (post-residual) state, and again
    after each contrastive round.
    """
    h_prev = as_state(h_prev, model.dim)
    raw = model_step(model, h_prev, ctx)
    rounds = cfg.rounds_at(t) if cfg.mode != "none" else 0
    residual = cfg.uses_residual and rounds > 0
    post = residual_refine(h_prev, raw, cfg.alpha) if residual else raw
    h = post
    searches = []
    if cfg.uses_search and rounds > 0:
        if pair is None:
            raise ValueError(f"mode {cfg.mode!r} needs a good/bad checkpoint pair")
        if pair.dim != model.dim:
            raise DimensionError(f"pair dim {pair.dim} != model dim {model.dim}")
        for _ in range(rounds):
            h_good = model_step(pair.good, h, ctx)
            h_bad = model_step(pair.bad, h, ctx)
            grad = contrastive_gradient(h, h_good, h_bad)
            before = contrastive_loss(h, h_good, h_bad)
            h = contrastive_update(h, grad, cfg.eta, cfg.literal_sign)
            searches.append(SearchRecord(grad.norm, before, contrastive_loss(h, h_good, h_bad)))
    if not np.all(np.isfinite(h)):
        raise FloatingPointError(f"latent state became non-finite at step {t}")
    return StepRecord(t, raw, post, h, rounds, residual, searches)


def refinement_round(h_prev, model: DynamicsModel, pair: CheckpointPair | None, cfg: RefinementConfig,
                     ctx: StepContext | None = None, t: int = 1) -> np.ndarray:
    return refine_step(h_prev, model, pair, cfg, ctx, t).state
