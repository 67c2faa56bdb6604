"""Exploration agents with a differentiable SLAM-structured memory, trained
with asynchronous advantage actor-critic on a grid world."""
from .a3c import TrainConfig, TrainResult, evaluate, train
from .env import Action, AgentPose, Heading, World, generate_world, load_world, reset, save_world, step
from .estimator import NeuralSLAMExplorer
from .evaluation import EvalReport, RunConfig, generate_world_set, replay_render, run_suite
from .model import ArchConfig, ModelParams, Variant, forward, initial_state, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Action", "AgentPose", "ArchConfig", "EvalReport", "Heading", "ModelParams", "NeuralSLAMExplorer",
    "RunConfig", "TrainConfig", "TrainResult", "Variant", "World", "evaluate", "forward",
    "generate_world", "generate_world_set", "initial_state", "load_checkpoint", "load_world",
    "replay_render", "reset", "run_suite", "save_checkpoint", "save_world", "step", "train",
]
