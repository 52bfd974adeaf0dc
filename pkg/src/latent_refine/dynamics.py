"""Latent dynamics models: the step map f, the encoder and the decode head.

Backends
--------
``MlpModel``      f(h) = tanh(h W1 + b1) W2 + b2, linear decode head, fixed encoder.
``OracleModel``   moves a fraction of the way toward the instance's gold step.
``IdentityModel`` f(h) = h; handy fixed point for tests.

All models are immutable: parameter arrays are marked read-only on
construction and training produces new instances.
"""

from __future__ import annotations

import hashlib
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AnswerDistribution, DimensionError, Featurizer, as_state
from .tasks import TaskInstance, aligned_step_index

CHECKPOINT_FORMAT_VERSION = 1
MLP_PARAM_ORDER = ("W1", "b1", "W2", "b2", "decode_W", "decode_b", "encoder_W")


@dataclass(frozen=True)
class StepContext:
    """Where in which query a step happens; only oracle backends need it."""

    instance: TaskInstance
    t: int
    total_steps: int


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class DynamicsModel(ABC):
    backend_tag = "abstract"

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @property
    @abstractmethod
    def n_choices(self) -> int: ...

    @abstractmethod
    def encode(self, x: TaskInstance) -> np.ndarray: ...

    @abstractmethod
    def step(self, h: np.ndarray, ctx: StepContext | None = None) -> np.ndarray: ...

    @abstractmethod
    def decode_logits(self, h: np.ndarray) -> np.ndarray: ...

    def decode(self, h, labels: Sequence[str] | None = None) -> AnswerDistribution:
        return AnswerDistribution.from_logits(self.decode_logits(h), labels)

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def reseed(self, seed: int) -> "DynamicsModel":
        """Copy with a different noise realisation (no-op for deterministic backends)."""
        return self


def model_step(m: DynamicsModel, h, ctx: StepContext | None = None) -> np.ndarray:
    h = as_state(h, m.dim)
    out = m.step(h, ctx)
    if out.shape != (m.dim,):
        raise DimensionError(f"{type(m).__name__}.step changed shape to {out.shape}")
    return out


def decode_answer(m: DynamicsModel, h, labels: Sequence[str] | None = None) -> AnswerDistribution:
    h = as_state(h, m.dim)
    if labels is not None and len(labels) != m.n_choices:
        raise DimensionError(f"{len(labels)} labels for a {m.n_choices}-way decode head")
    return m.decode(h, labels)


# ---------------------------------------------------------------------------
# MLP backend


@dataclass(frozen=True, eq=False)
class MlpModel(DynamicsModel):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    decode_W: np.ndarray
    decode_b: np.ndarray
    encoder_W: np.ndarray = field(repr=False)

    backend_tag = "mlp"

    def __post_init__(self):
        for name in MLP_PARAM_ORDER:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        d, H = self.W1.shape
        C = self.decode_W.shape[1] if self.decode_W.ndim == 2 else -1
        expected = {
            "W1": (d, H),
            "b1": (H,),
            "W2": (H, d),
            "b2": (d,),
            "decode_W": (d, C),
            "decode_b": (C,),
            "encoder_W": (self.encoder_W.shape[0], d) if self.encoder_W.ndim == 2 else (-1, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if C < 2:
            raise DimensionError("decode head needs at least two choices")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in MLP_PARAM_ORDER):
            raise ValueError("MLP parameters must be finite")

    @classmethod
    def init(cls, featurizer: Featurizer, hidden: int, n_choices: int = 5, seed: int = 0,
             scale: float = 1.0) -> "MlpModel":
        d = featurizer.dim
        rng = np.random.default_rng([int(seed), d, hidden, 0x3C9])
        return cls(
            W1=rng.standard_normal((d, hidden)) * scale / math.sqrt(d),
            b1=np.zeros(hidden),
            W2=rng.standard_normal((hidden, d)) * scale / math.sqrt(hidden),
            b2=np.zeros(d),
            decode_W=rng.standard_normal((d, n_choices)) * 0.1 / math.sqrt(d),
            decode_b=np.zeros(n_choices),
            encoder_W=featurizer.matrix,
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int, n_choices: int, feature_width: int) -> "MlpModel":
        return cls(
            np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim),
            np.zeros((dim, n_choices)), np.zeros(n_choices), np.zeros((feature_width, dim)),
        )

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_choices(self) -> int:
        return self.decode_W.shape[1]

    @property
    def feature_width(self) -> int:
        return self.encoder_W.shape[0]

    def encode(self, x: TaskInstance) -> np.ndarray:
        if x.width != self.feature_width:
            raise DimensionError(f"instance width {x.width} != encoder width {self.feature_width}")
        return x.question_features @ self.encoder_W

    def step(self, h, ctx=None) -> np.ndarray:
        return np.tanh(h @ self.W1 + self.b1) @ self.W2 + self.b2

    def decode_logits(self, h) -> np.ndarray:
        return h @ self.decode_W + self.decode_b

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in MLP_PARAM_ORDER}

    def with_parameters(self, **params) -> "MlpModel":
        merged = self.parameters()
        merged.update(params)
        return MlpModel(**merged)


# ---------------------------------------------------------------------------
# oracle backends


def _id_key(instance_id: str) -> int:
    return int.from_bytes(hashlib.sha256(instance_id.encode()).digest()[:8], "big")


@dataclass(frozen=True, eq=False)
class OracleModel(DynamicsModel):
    """Pulls the state toward the gold step embedding of the current latent step.

    ``step(h) = h + direction * pull * (g_t - h) + noise * xi`` where ``g_t`` is
    the embedded gold step aligned to latent step ``t`` and ``xi`` is a standard
    normal vector fixed by ``(noise_seed, instance id, t)``. ``direction=-1``
    gives the anti-oracle that pushes away from gold.
    """

    featurizer: Featurizer
    n_choices: int = 5
    pull: float = 1.0
    noise: float = 0.0
    noise_seed: int = 0
    direction: int = 1
    sharpness: float = 5.0
    readout: np.ndarray = field(init=False, repr=False)

    backend_tag = "oracle"

    def __post_init__(self):
        if not (0.0 < self.pull <= 1.0):
            raise ValueError(f"pull must lie in (0, 1], got {self.pull}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        # reads the answer block back out of latent space
        pinv = self.featurizer.pseudo_inverse()
        object.__setattr__(self, "readout", _frozen(pinv[:, -self.n_choices:] * self.sharpness))

    @property
    def dim(self) -> int:
        return self.featurizer.dim

    def encode(self, x: TaskInstance) -> np.ndarray:
        return self.featurizer.embed(x.question_features)

    def target(self, ctx: StepContext) -> np.ndarray:
        x = ctx.instance
        idx = aligned_step_index(ctx.t, ctx.total_steps, x.n_steps)
        return self.featurizer.embed(x.steps[idx])

    def step(self, h, ctx: StepContext | None = None) -> np.ndarray:
        if ctx is None:
            raise ValueError("OracleModel.step needs a StepContext")
        out = h + self.direction * self.pull * (self.target(ctx) - h)
        if self.noise > 0:
            rng = np.random.default_rng([int(self.noise_seed), _id_key(ctx.instance.id), int(ctx.t)])
            out = out + self.noise * rng.standard_normal(self.dim)
        return out

    def decode_logits(self, h) -> np.ndarray:
        return h @ self.readout

    def parameters(self) -> dict[str, np.ndarray]:
        return {"encoder_W": self.featurizer.matrix, "readout": self.readout}

    def reseed(self, seed: int) -> "OracleModel":
        return replace(self, noise_seed=int(seed))


@dataclass(frozen=True, eq=False)
class IdentityModel(DynamicsModel):
    featurizer: Featurizer
    readout: np.ndarray = field(repr=False)

    backend_tag = "identity"

    def __post_init__(self):
        object.__setattr__(self, "readout", _frozen(self.readout))

    @property
    def dim(self) -> int:
        return self.featurizer.dim

    @property
    def n_choices(self) -> int:
        return self.readout.shape[1]

    def encode(self, x):
        return self.featurizer.embed(x.question_features)

    def step(self, h, ctx=None):
        return np.array(h, dtype=np.float64)

    def decode_logits(self, h):
        return h @ self.readout

    def parameters(self):
        return {"encoder_W": self.featurizer.matrix, "readout": self.readout}


@dataclass(frozen=True)
class CheckpointPair:
    good: DynamicsModel
    bad: DynamicsModel

    def __post_init__(self):
        if self.good.dim != self.bad.dim:
            raise DimensionError(f"good dim {self.good.dim} != bad dim {self.bad.dim}")

    @property
    def dim(self) -> int:
        return self.good.dim

    def reseed(self, seed: int) -> "CheckpointPair":
        return CheckpointPair(self.good.reseed(seed), self.bad.reseed(seed))


def make_oracle_arm(featurizer: Featurizer, noise: float, pull: float = 1.0, noise_seed: int = 0,
                    n_choices: int = 5, sharpness: float = 5.0) -> tuple[OracleModel, CheckpointPair]:
    """Noisy oracle as the main model, clean oracle as good, anti-oracle as bad."""
    main = OracleModel(featurizer, n_choices, pull=pull, noise=noise, noise_seed=noise_seed,
                       sharpness=sharpness)
    good = OracleModel(featurizer, n_choices, pull=pull, sharpness=sharpness)
    bad = OracleModel(featurizer, n_choices, pull=pull, direction=-1, sharpness=sharpness)
    return main, CheckpointPair(good, bad)


# ---------------------------------------------------------------------------
# checkpoint files


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


def checkpoint_document(m: MlpModel, meta: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backend_tag": m.backend_tag,
        "d": m.dim,
        "H": m.hidden,
        "n_choices": m.n_choices,
        "feature_width": m.feature_width,
        "meta": dict(meta or {}),
        # Python float repr is the shortest round-tripping decimal
        "params": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in m.parameters().items()
        },
    }


def save_checkpoint(m: MlpModel, path, meta: dict | None = None) -> Path:
    if not isinstance(m, MlpModel):
        raise TypeError("only MlpModel checkpoints are serialisable")
    path = Path(path)
    path.write_text(json.dumps(checkpoint_document(m, meta), indent=1))
    return path


def model_from_document(doc) -> MlpModel:
    if not isinstance(doc, dict):
        raise CheckpointFormatError("checkpoint root is not an object")
    if "format_version" not in doc:
        raise CheckpointFormatError("missing format_version")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format_version {doc['format_version']!r}, this reader supports {CHECKPOINT_FORMAT_VERSION}"
        )
    try:
        if doc["backend_tag"] != "mlp":
            raise CheckpointFormatError(f"unsupported backend_tag {doc['backend_tag']!r}")
        d, H, C, F = (int(doc[k]) for k in ("d", "H", "n_choices", "feature_width"))
        params = doc["params"]
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"missing or invalid header field: {e}") from None
    expected = {
        "W1": (d, H), "b1": (H,), "W2": (H, d), "b2": (d,),
        "decode_W": (d, C), "decode_b": (C,), "encoder_W": (F, d),
    }
    arrays = {}
    for name in MLP_PARAM_ORDER:
        entry = params.get(name) if isinstance(params, dict) else None
        if not isinstance(entry, dict) or "data" not in entry:
            raise CheckpointFormatError(f"parameter {name} missing")
        try:
            data = np.asarray(entry["data"], dtype=np.float64)
        except (TypeError, ValueError):
            raise CheckpointFormatError(f"parameter {name} is not numeric") from None
        shape = expected[name]
        if data.ndim != 1 or data.size != math.prod(shape) or tuple(entry.get("shape", shape)) != shape:
            raise CheckpointShapeError(f"parameter {name}: {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return MlpModel(**arrays)


def load_checkpoint(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path}: not valid JSON ({e.msg})") from None
    return model_from_document(doc)


def checkpoint_meta(path) -> dict:
    return json.loads(Path(path).read_text()).get("meta", {})


def parameter_digest(m: DynamicsModel) -> str:
    """SHA-256 over the raw bytes of every parameter array."""
    h = hashlib.sha256()
    for name, arr in sorted(m.parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
