"""Supervised SGD trainer for the MLP dynamics backend.

The loss for a batch is

    answer_weight * CE(decode(h^T), gold) + latent_weight * sum_t mse(h^t, g_t)

averaged over the batch, where g_t is the embedded gold step aligned to latent
step t (latent term only under ``latent_cot``). Gradients are exact
backpropagation through the unrolled T-step recursion.

With ``train_refinement`` set, the unrolled recursion includes the residual
blend, and the contrastive correction when a reference pair is given. That
correction is treated as a constant offset during backpropagation, matching
the stop-gradient used at inference.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Featurizer, RefinementConfig
from .dynamics import CheckpointPair, MlpModel, save_checkpoint
from .tasks import TaskInstance, aligned_step_index

log = logging.getLogger(__name__)

TRAINABLE = ("W1", "b1", "W2", "b2", "decode_W", "decode_b")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    answer_weight: float = 1.0
    latent_weight: float = 1.0
    checkpoint_epochs: tuple[int, ...] = (5, 30)
    steps_T: int = 3
    dim: int = 64
    hidden: int = 64
    train_refinement: RefinementConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_epochs", tuple(int(e) for e in self.checkpoint_epochs))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        bad = [e for e in self.checkpoint_epochs if not 1 <= e <= self.epochs]
        if bad:
            raise ValueError(f"checkpoint epochs {bad} outside [1, {self.epochs}]")


@dataclass
class Batch:
    X: np.ndarray            # (B, F) question features
    y: np.ndarray            # (B,) gold choice index
    targets: np.ndarray | None  # (T, B, d) embedded gold steps, or None


def make_batch(instances: Sequence[TaskInstance], encoder_W: np.ndarray, steps_T: int,
               with_targets: bool) -> Batch:
    X = np.stack([x.question_features for x in instances])
    y = np.array([x.gold_index for x in instances], dtype=np.int64)
    targets = None
    if with_targets:
        targets = np.stack([
            np.stack([x.steps[aligned_step_index(t, steps_T, x.n_steps)] for x in instances]) @ encoder_W
            for t in range(1, steps_T + 1)
        ])
    return Batch(X, y, targets)


def _refinement_settings(cfg: TrainConfig):
    rc = cfg.train_refinement
    alpha = rc.alpha if rc is not None and rc.uses_residual else 0.0
    search = rc is not None and rc.uses_search
    return alpha, search, rc


def _batch_step(params: dict, h: np.ndarray) -> np.ndarray:
    return np.tanh(h @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"]


def forward(params: dict, encoder_W: np.ndarray, batch: Batch, cfg: TrainConfig,
            pair: CheckpointPair | None = None):
    """Unrolled forward pass; returns ``(loss, cache)``."""
    alpha, search, rc = _refinement_settings(cfg)
    B = batch.X.shape[0]
    h = batch.X @ encoder_W
    d = h.shape[1]
    hs, us = [h], []
    latent = 0.0
    for t in range(cfg.steps_T):
        u = np.tanh(h @ params["W1"] + params["b1"])
        raw = u @ params["W2"] + params["b2"]
        h = alpha * h + (1.0 - alpha) * raw if alpha else raw
        if search and pair is not None:
            for _ in range(max(rc.rounds_R, 1)):
                diff = _batch_step(pair.good.parameters(), h) - _batch_step(pair.bad.parameters(), h)
                h = h + (rc.eta * 2.0 / d) * diff * (-1.0 if rc.literal_sign else 1.0)
        us.append(u)
        hs.append(h)
        if batch.targets is not None:
            latent += np.sum((h - batch.targets[t]) ** 2) / (d * B)
    logits = h @ params["decode_W"] + params["decode_b"]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(B), batch.y].mean()
    loss = cfg.answer_weight * ce + cfg.latent_weight * latent
    return float(loss), {"hs": hs, "us": us, "logp": logp, "alpha": alpha}


def backward(params: dict, batch: Batch, cfg: TrainConfig, cache: dict) -> dict:
    hs, us, logp, alpha = cache["hs"], cache["us"], cache["logp"], cache["alpha"]
    B, d = hs[0].shape
    grads = {k: np.zeros_like(params[k]) for k in TRAINABLE}
    dlogits = np.exp(logp)
    dlogits[np.arange(B), batch.y] -= 1.0
    dlogits *= cfg.answer_weight / B
    grads["decode_W"] = hs[-1].T @ dlogits
    grads["decode_b"] = dlogits.sum(axis=0)
    dh = dlogits @ params["decode_W"].T
    for t in range(cfg.steps_T, 0, -1):
        if batch.targets is not None:
            dh = dh + cfg.latent_weight * (2.0 / (d * B)) * (hs[t] - batch.targets[t - 1])
        # contrastive correction is a constant offset: gradient passes straight through
        draw = (1.0 - alpha) * dh
        dprev = alpha * dh
        u = us[t - 1]
        grads["W2"] += u.T @ draw
        grads["b2"] += draw.sum(axis=0)
        da = (draw @ params["W2"].T) * (1.0 - u * u)
        grads["W1"] += hs[t - 1].T @ da
        grads["b1"] += da.sum(axis=0)
        dh = dprev + da @ params["W1"].T
    return grads


def loss_and_grads(model: MlpModel, batch: Batch, cfg: TrainConfig, pair: CheckpointPair | None = None):
    params = {k: np.asarray(v) for k, v in model.parameters().items()}
    loss, cache = forward(params, model.encoder_W, batch, cfg, pair)
    return loss, backward(params, batch, cfg, cache)


def batch_predict(model: MlpModel, instances: Sequence[TaskInstance], steps_T: int) -> np.ndarray:
    """Plain-recursion argmax predictions for a list of instances."""
    params = model.parameters()
    h = np.stack([x.question_features for x in instances]) @ model.encoder_W
    for _ in range(steps_T):
        h = _batch_step(params, h)
    return np.argmax(h @ model.decode_W + model.decode_b, axis=1)


def accuracy(model: MlpModel, instances: Sequence[TaskInstance], steps_T: int) -> float:
    y = np.array([x.gold_index for x in instances])
    return float(np.mean(batch_predict(model, instances, steps_T) == y) * 100.0)


@dataclass
class TrainResult:
    model: MlpModel
    snapshots: dict[int, MlpModel]
    history: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    paths: dict[int, Path] = field(default_factory=dict)


def train_mlp(
    data: Sequence[TaskInstance],
    fmt: str,
    cfg: TrainConfig,
    init: MlpModel | None = None,
    pair: CheckpointPair | None = None,
    out_dir=None,
) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    if fmt == "cot":
        raise ValueError("the MLP backend emits no tokens; train it with 'no_cot' or 'latent_cot'")
    if fmt not in ("no_cot", "latent_cot"):
        raise ValueError(f"unknown supervision format {fmt!r}")
    n_choices = len(data[0].choices)
    if init is None:
        featurizer = Featurizer.create(data[0].width, cfg.dim, cfg.seed)
        init = MlpModel.init(featurizer, cfg.hidden, n_choices, cfg.seed)
    full = make_batch(data, init.encoder_W, cfg.steps_T, fmt == "latent_cot")
    params = {k: np.array(v) for k, v in init.parameters().items() if k in TRAINABLE}
    encoder_W = init.encoder_W
    rng = np.random.default_rng([int(cfg.seed), 0x7A1])
    initial_loss, _ = forward(params, encoder_W, full, cfg, pair)
    result = TrainResult(init, {}, [], initial_loss)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(full.X[idx], full.y[idx], None if full.targets is None else full.targets[:, idx])
            loss, cache = forward(params, encoder_W, batch, cfg, pair)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch starting {start}; lower the learning rate"
                )
            grads = backward(params, batch, cfg, cache)
            for k in TRAINABLE:
                params[k] -= cfg.lr * grads[k]
        epoch_loss, _ = forward(params, encoder_W, full, cfg, pair)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"loss became {epoch_loss} after epoch {epoch}")
        result.history.append(epoch_loss)
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
        if epoch in cfg.checkpoint_epochs:
            snap = init.with_parameters(**params)
            result.snapshots[epoch] = snap
            if out_dir is not None:
                result.paths[epoch] = save_checkpoint(
                    snap, out_dir / f"ckpt_epoch{epoch:04d}.json", {"epoch": epoch, "seed": cfg.seed}
                )
    result.model = init.with_parameters(**params)
    return result


def make_checkpoint_pair(
    snapshots: dict[int, MlpModel],
    bad_epoch: int,
    good_epoch: int,
    val_data: Sequence[TaskInstance] | None = None,
    steps_T: int = 3,
) -> CheckpointPair:
    """Pair an earlier snapshot (bad) with a later one (good).

    If validation data is given, both accuracies are logged and a warning is
    issued when the later snapshot is not at least as accurate.
    """
    if not bad_epoch < good_epoch:
        raise ValueError(f"bad epoch ({bad_epoch}) must precede good epoch ({good_epoch})")
    missing = [e for e in (bad_epoch, good_epoch) if e not in snapshots]
    if missing:
        raise KeyError(f"no snapshot for epoch(s) {missing}; have {sorted(snapshots)}")
    good, bad = snapshots[good_epoch], snapshots[bad_epoch]
    if val_data:
        acc_good = accuracy(good, val_data, steps_T)
        acc_bad = accuracy(bad, val_data, steps_T)
        log.info("checkpoint pair: bad epoch %d acc %.2f%%, good epoch %d acc %.2f%%",
                 bad_epoch, acc_bad, good_epoch, acc_good)
        if acc_good < acc_bad:
            warnings.warn(
                f"good snapshot (epoch {good_epoch}, {acc_good:.2f}%) is less accurate than "
                f"bad snapshot (epoch {bad_epoch}, {acc_bad:.2f}%)",
                stacklevel=2,
            )
    return CheckpointPair(good=good, bad=bad)
