"""scikit-learn style wrapper around training and suite evaluation.

``X`` is a sequence of worlds (``World`` objects or world-file paths).
``fit`` trains on generated worlds and ignores ``X``. An RL agent has no
fixed training set, so ``X`` is accepted only for Pipeline compatibility.
``predict`` returns per-world episode lengths and ``score`` the success
ratio.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import env as gw
from .a3c import TrainConfig, hash_seed, train
from .evaluation import EpisodeRow, EvalReport, run_episode
from .model import ModelParams, Variant


def check_worlds(X) -> list[gw.World]:
    """Coerce ``X`` into a non-empty list of worlds."""
    if isinstance(X, (gw.World, str, Path)):
        X = [X]
    try:
        items = list(X)
    except TypeError as err:
        raise TypeError(f"expected a sequence of worlds or world files, got {type(X).__name__}") from err
    if not items:
        raise ValueError("empty world set")
    out = []
    for item in items:
        if isinstance(item, gw.World):
            out.append(item)
        elif isinstance(item, (str, Path)):
            out.append(gw.load_world(item))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a world")
    return out


def check_is_trained(est) -> None:
    if getattr(est, "params_", None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class NeuralSLAMExplorer(BaseEstimator):
    def __init__(self, variant="neural_slam", workers=1, total_steps=200_000, lr=1e-4,
                 courses=(8, 10, 12), step_cap=gw.MAX_STEPS, seed=0, train_options=None):
        self.variant = variant
        self.workers = workers
        self.total_steps = total_steps
        self.lr = lr
        self.courses = courses
        self.step_cap = step_cap
        self.seed = seed
        self.train_options = train_options

    def fit(self, X=None, y=None):
        variant = Variant.parse(self.variant)
        if variant is Variant.RANDOM:
            self.params_ = ModelParams.create(variant)
            self.history_ = []
            return self
        # any other TrainConfig field (gamma, architecture, ...) comes through train_options
        opts = {**(self.train_options or {}), "variant": variant.value, "workers": self.workers,
                "total_steps": self.total_steps, "lr": self.lr, "courses": tuple(self.courses),
                "seed": self.seed}
        cfg = TrainConfig.from_dict(opts)
        result = train(cfg)
        self.params_ = result.params
        self.history_ = [s.as_dict() for s in result.evals]
        return self

    def evaluate(self, X) -> EvalReport:
        check_is_trained(self)
        worlds = check_worlds(X)
        cap = None if self.params_.variant is Variant.RANDOM else self.step_cap
        report = EvalReport()
        for i, world in enumerate(worlds):
            steps, reward, solved = run_episode(self.params_, world, hash_seed(self.seed, i), cap)
            report.rows.append(EpisodeRow(f"world_{i:03d}", steps, reward, solved))
        return report

    def predict(self, X) -> np.ndarray:
        """Episode length per world under the greedy policy."""
        return np.array([r.steps for r in self.evaluate(X).rows], dtype=np.int64)

    def score(self, X, y=None) -> float:
        return self.evaluate(X).success_ratio
