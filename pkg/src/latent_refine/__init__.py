"""Training-free refinement of latent reasoning states.

Residual blending of consecutive latent states and a contrastive update that
moves each state toward a stronger reference model and away from a weaker one,
over pluggable latent dynamics backends and synthetic multi-step tasks.
"""

from .core import AnswerDistribution, Featurizer, RefinementConfig
from .dynamics import CheckpointPair, MlpModel, OracleModel, load_checkpoint, save_checkpoint
from .engine import Trajectory, evaluate, run_inference
from .refine import contrastive_gradient, contrastive_update, refine_step, residual_refine
from .tasks import TaskInstance, gen_dag_reach, gen_mod_chain, generate

__all__ = [
    "AnswerDistribution", "Featurizer", "RefinementConfig",
    "CheckpointPair", "MlpModel", "OracleModel", "load_checkpoint", "save_checkpoint",
    "Trajectory", "evaluate", "run_inference",
    "contrastive_gradient", "contrastive_update", "refine_step", "residual_refine",
    "TaskInstance", "gen_dag_reach", "gen_mod_chain", "generate",
]
