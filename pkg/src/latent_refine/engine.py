"""Inference loop: encode, T refined latent steps, decode from the final state."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import AnswerDistribution, DimensionError, RefinementConfig
from .dynamics import CheckpointPair, DynamicsModel, StepContext, decode_answer
from .refine import StepRecord, refine_step
from .tasks import TaskInstance

TRAJECTORY_SCHEMA_VERSION = 1


@dataclass
class Trajectory:
    instance_id: str
    config: RefinementConfig
    states: list[np.ndarray]
    steps: list[StepRecord]
    answer: AnswerDistribution
    gold: str | None = None

    @property
    def predicted(self) -> str:
        return self.answer.predicted

    @property
    def correct(self) -> bool:
        return self.gold is not None and self.predicted == self.gold

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_dict(self) -> dict:
        return {
            "schema_version": TRAJECTORY_SCHEMA_VERSION,
            "instance_id": self.instance_id,
            "config": asdict(self.config),
            "states": [h.tolist() for h in self.states],
            "steps": [
                {
                    "t": s.t,
                    "rounds": s.rounds,
                    "residual_applied": s.residual_applied,
                    "raw": s.raw.tolist(),
                    "post_residual": s.post_residual.tolist(),
                    "searches": [asdict(r) for r in s.searches],
                }
                for s in self.steps
            ],
            "answer": self.answer.as_dict(),
            "predicted": self.predicted,
            "gold": self.gold,
        }


def _validate(x: TaskInstance, model: DynamicsModel, pair: CheckpointPair | None, cfg: RefinementConfig):
    if not isinstance(cfg, RefinementConfig):
        raise TypeError("cfg must be a RefinementConfig")
    if model.dim < 1:
        raise DimensionError("model has zero latent dimension")
    if len(x.choices) != model.n_choices:
        raise DimensionError(f"instance has {len(x.choices)} choices, decode head has {model.n_choices}")
    if pair is not None and pair.dim != model.dim:
        raise DimensionError(f"pair dim {pair.dim} != model dim {model.dim}")


def run_inference(x: TaskInstance, model: DynamicsModel, pair: CheckpointPair | None,
                  cfg: RefinementConfig) -> Trajectory:
    _validate(x, model, pair, cfg)
    h = np.asarray(model.encode(x), dtype=np.float64)
    if h.shape != (model.dim,):
        raise DimensionError(f"encoder produced shape {h.shape}, expected ({model.dim},)")
    states = [h]
    steps = []
    T = cfg.steps_T
    for t in range(1, T + 1):
        rec = refine_step(h, model, pair, cfg, StepContext(x, t, T), t)
        steps.append(rec)
        h = rec.state
        states.append(h)
    answer = decode_answer(model, h, x.choices)
    return Trajectory(x.id, cfg, states, steps, answer, x.gold)


def evaluate(instances: Sequence[TaskInstance], model: DynamicsModel, pair: CheckpointPair | None,
             cfg: RefinementConfig, workers: int = 1) -> list[Trajectory]:
    """Run inference over ``instances``; results keep the input order."""
    if workers <= 1:
        return [run_inference(x, model, pair, cfg) for x in instances]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda x: run_inference(x, model, pair, cfg), instances))


@dataclass
class TraceRecord:
    instance_id: str
    gold: str | None
    before: AnswerDistribution
    after: AnswerDistribution
    mode: str

    @property
    def flip(self) -> bool:
        return self.before.argmax != self.after.argmax

    @property
    def corrected(self) -> bool:
        return self.before.predicted != self.gold and self.after.predicted == self.gold

    def to_dict(self) -> dict:
        return {
            "schema_version": TRAJECTORY_SCHEMA_VERSION,
            "instance_id": self.instance_id,
            "gold": self.gold,
            "mode": self.mode,
            "before": self.before.as_dict(),
            "after": self.after.as_dict(),
            "predicted_before": self.before.predicted,
            "predicted_after": self.after.predicted,
            "flip": self.flip,
            "corrected": self.corrected,
        }


def trace_compare(x: TaskInstance, model: DynamicsModel, pair: CheckpointPair | None,
                  cfg: RefinementConfig) -> TraceRecord:
    base = run_inference(x, model, pair, cfg.replace(mode="none"))
    refined = run_inference(x, model, pair, cfg)
    return TraceRecord(x.id, x.gold, base.answer, refined.answer, cfg.mode)


def find_flip_cases(instances: Sequence[TaskInstance], model: DynamicsModel, pair: CheckpointPair | None,
                    cfg: RefinementConfig, limit: int | None = None) -> list[TraceRecord]:
    """Trace records where the baseline errs and the refined run picks gold."""
    out = []
    for x in instances:
        rec = trace_compare(x, model, pair, cfg)
        if rec.corrected:
            out.append(rec)
            if limit is not None and len(out) >= limit:
                break
    return out


def export_trajectories(trajectories: Sequence[Trajectory], path) -> Path:
    """Write one JSON document per line."""
    path = Path(path)
    with path.open("w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict()) + "\n")
    return path


def export_traces(records: Sequence[TraceRecord], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in records], indent=1))
    return path
