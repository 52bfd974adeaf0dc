"""Domain types and vector arithmetic shared across the package.

A latent state is represented as a 1-D ``float64`` numpy array. Every helper
here returns a fresh array, so callers never alias each other's buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

MODES = ("none", "residual", "search", "both")
ROUND_POLICIES = ("per_step", "per_query")
DEFAULT_LABELS = ("a", "b", "c", "d", "e")


class DimensionError(ValueError):
    """Raised when two latent vectors (or a vector and a model) disagree on d."""


def as_state(values, dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a latent state and return a float64 copy."""
    h = np.array(values, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise DimensionError(f"latent state must be a non-empty vector, got shape {h.shape}")
    if dim is not None and h.size != dim:
        raise DimensionError(f"expected dim {dim}, got {h.size}")
    if not np.all(np.isfinite(h)):
        raise ValueError("latent state contains NaN or Inf")
    return h


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_state(a)
    b = as_state(b)
    if a.size != b.size:
        raise DimensionError(f"dimension mismatch: {a.size} vs {b.size}")
    return a, b


def mse(a, b) -> float:
    """Mean squared error, normalised by d."""
    a, b = _pair(a, b)
    diff = a - b
    return float(np.dot(diff, diff) / a.size)


def lerp(prev, nxt, alpha: float) -> np.ndarray:
    """Return ``alpha * prev + (1 - alpha) * nxt`` componentwise.

    Evaluated as ``nxt + alpha * (prev - nxt)`` so that alpha=0, alpha=1 and
    ``prev == nxt`` all return an input exactly.
    """
    prev, nxt = _pair(prev, nxt)
    check_alpha(alpha)
    if alpha == 1.0:
        return prev
    return nxt + alpha * (prev - nxt)


def check_alpha(alpha: float) -> None:
    if not (0.0 <= alpha <= 1.0) or math.isnan(alpha):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


@dataclass(frozen=True)
class AnswerDistribution:
    probabilities: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        p = np.array(self.probabilities, dtype=np.float64)
        labels = tuple(self.labels)
        if p.ndim != 1 or p.size != len(labels):
            raise ValueError(f"{p.size} probabilities for {len(labels)} labels")
        if p.size < 2:
            raise ValueError("an answer distribution needs at least two choices")
        if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {p}")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_logits(cls, logits, labels: Sequence[str] | None = None) -> "AnswerDistribution":
        logits = np.asarray(logits, dtype=np.float64)
        if labels is None:
            labels = DEFAULT_LABELS[: logits.size]
        return cls(softmax(logits), tuple(labels))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probabilities))

    @property
    def predicted(self) -> str:
        return self.labels[self.argmax]

    def as_dict(self) -> dict[str, float]:
        return {lab: float(p) for lab, p in zip(self.labels, self.probabilities)}


@dataclass(frozen=True)
class RefinementConfig:
    """Inference-time refinement settings.

    ``rounds_R`` counts refinement rounds. Under the ``per_step`` policy every
    latent step receives that many rounds; under ``per_query`` the rounds are
    spread over the T steps (steps left without a round run the plain update).
    Within one step the residual blend is applied once and the contrastive
    update once per round.
    """

    alpha: float = 0.5
    eta: float = 1.0
    steps_T: int = 3
    rounds_R: int = 1
    mode: str = "both"
    literal_sign: bool = False
    round_policy: str = "per_step"

    def __post_init__(self):
        check_alpha(self.alpha)
        if not (self.eta > 0) or not math.isfinite(self.eta):
            raise ValueError(f"eta must be a positive finite number, got {self.eta}")
        if int(self.steps_T) != self.steps_T or self.steps_T < 1:
            raise ValueError(f"steps_T must be an integer >= 1, got {self.steps_T}")
        if int(self.rounds_R) != self.rounds_R or self.rounds_R < 0:
            raise ValueError(f"rounds_R must be an integer >= 0, got {self.rounds_R}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.round_policy not in ROUND_POLICIES:
            raise ValueError(f"round_policy must be one of {ROUND_POLICIES}, got {self.round_policy!r}")

    @property
    def uses_residual(self) -> bool:
        return self.mode in ("residual", "both")

    @property
    def uses_search(self) -> bool:
        return self.mode in ("search", "both")

    def rounds_at(self, t: int) -> int:
        """Number of refinement rounds applied at latent step ``t`` (1-based)."""
        if self.round_policy == "per_step":
            return self.rounds_R
        base, extra = divmod(self.rounds_R, self.steps_T)
        return base + (1 if t <= extra else 0)

    def replace(self, **changes) -> "RefinementConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Featurizer:
    """Fixed random linear map from task features to latent space.

    When the feature width fits inside d the rows are orthonormal, so the
    embedding is exactly invertible by its transpose.
    """

    matrix: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, width: int, dim: int, seed: int) -> "Featurizer":
        if width < 1 or dim < 1:
            raise ValueError("featurizer needs positive width and dim")
        rng = np.random.default_rng([int(seed), width, dim, 0xFEA7])
        if width <= dim:
            q, _ = np.linalg.qr(rng.standard_normal((dim, width)))
            m = q.T.copy()
        else:
            m = rng.standard_normal((width, dim)) / math.sqrt(dim)
        return cls(m)

    @property
    def width(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def embed(self, features) -> np.ndarray:
        z = np.asarray(features, dtype=np.float64)
        if z.shape[-1] != self.width:
            raise DimensionError(f"feature width {z.shape[-1]} != featurizer width {self.width}")
        return z @ self.matrix

    def pseudo_inverse(self) -> np.ndarray:
        return np.linalg.pinv(self.matrix)
