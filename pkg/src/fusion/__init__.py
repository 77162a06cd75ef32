"""Safety-aware offline RL: a return/cost-conditioned causal transformer world
model with bisimulation-regularised state encoding, plus the driving
environment, scripted data collection and evaluation harness around it."""

from .cbl import BisimConfig, bisim_loss, bisim_target, cbl_step, w2_gaussian
from .dataset import OfflineDataset, collect, load, save
from .env import Context, LaneWorld, sample_context
from .model import CausalTransformer, ModelConfig, attention_entropy, traj_loss
from .rollout import RolloutConfig, evaluate, safety_categories, update_tokens
from .trainer import TrainConfig, fit, load_model

__all__ = [
    "BisimConfig", "bisim_loss", "bisim_target", "cbl_step", "w2_gaussian",
    "OfflineDataset", "collect", "load", "save",
    "Context", "LaneWorld", "sample_context",
    "CausalTransformer", "ModelConfig", "attention_entropy", "traj_loss",
    "RolloutConfig", "evaluate", "safety_categories", "update_tokens",
    "TrainConfig", "fit", "load_model",
]
