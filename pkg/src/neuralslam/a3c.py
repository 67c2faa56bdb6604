"""Asynchronous advantage actor-critic with a shared Adam optimiser.

Workers own their environment, model state and tape; they share one flat
parameter vector plus the Adam moment accumulators. Updates are applied
whole under a lock. With ``workers=1`` everything runs in-process and a
run is bit-reproducible for a fixed seed.
"""
from __future__ import annotations

import json
import logging
import multiprocessing as mp
import resource
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import env as gw
from . import memory as mem
from .autodiff import Tensor
from .model import ArchConfig, ModelParams, Variant, act, forward, initial_state, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    variant: str = "neural_slam"
    workers: int = 16
    rollout: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-4
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    grad_clip: float | None = 40.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    courses: tuple = (8, 10, 12)
    curriculum_threshold: float = 0.9
    eval_interval: int = 3000
    eval_length: int = 3000
    max_episode_steps: int = gw.MAX_STEPS
    total_steps: int = 200_000
    seed: int = 0
    density: float = 0.2
    reward_mode: str = "ground_truth"  # or "information_gain"
    hidden: int = 128
    memory_shape: tuple = (16, 16)
    channels: int = 32
    log_path: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.rollout < 1:
            raise ValueError("rollout must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.reward_mode not in ("ground_truth", "information_gain"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        self.courses = tuple(int(c) for c in self.courses)
        self.memory_shape = tuple(self.memory_shape)
        self.adam_betas = tuple(self.adam_betas)

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig(hidden=self.hidden, memory_shape=self.memory_shape, channels=self.channels)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# returns and loss
# --------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)     # Tensor (1,)
    log_probs: list = field(default_factory=list)  # Tensor (4,), full log-policy
    probs: list = field(default_factory=list)      # Tensor (4,)
    actions: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    bootstrap: float = 0.0
    terminal: bool = False

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, obs, action, reward, value, log_pi, pi) -> None:
        self.observations.append(obs)
        self.actions.append(int(action))
        self.rewards.append(float(reward))
        self.values.append(value)
        self.log_probs.append(log_pi)
        self.probs.append(pi)


def nstep_returns(rewards, bootstrap: float, gamma: float) -> np.ndarray:
    """``G_t = R_t + gamma * G_{t+1}`` starting from the bootstrap value."""
    out = np.empty(len(rewards))
    g = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def entropy(pi: Tensor, log_pi: Tensor) -> Tensor:
    return ad.neg(ad.sum_(ad.mul(pi, log_pi)))


@dataclass
class LossParts:
    total: Tensor
    policy: float
    value: float
    entropy: float


def a3c_loss(buffer: RolloutBuffer, returns, entropy_coef: float, value_coef: float = 0.5) -> LossParts:
    """Sum over the rollout of ``-log pi(a) * A - lambda * H + c * (G - V)^2``.

    The advantage ``A = G - V`` is a constant in the policy term.
    """
    total = Tensor(np.zeros(()))
    pol = val = ent = 0.0
    for t in range(len(buffer)):
        v = buffer.values[t]
        G = float(returns[t])
        adv = G - float(v.data.reshape(-1)[0])
        lp = ad.getitem(buffer.log_probs[t], buffer.actions[t])
        h = entropy(buffer.probs[t], buffer.log_probs[t])
        diff = ad.sub(G, ad.sum_(v))
        p_term = ad.mul(lp, -adv)
        v_term = ad.mul(ad.mul(diff, diff), value_coef)
        total = ad.add(total, ad.sub(ad.add(p_term, v_term), ad.mul(h, entropy_coef)))
        pol += float(p_term.data)
        val += float(v_term.data)
        ent += float(h.data)
    return LossParts(total, pol, val, ent)


# --------------------------------------------------------------------------
# shared optimiser
# --------------------------------------------------------------------------

class SharedOptimizerState:
    """Flat parameters, Adam moments and counters, optionally in shared memory.

    ``counters`` holds ``[global_env_steps, adam_steps, skipped_updates, course_index]``.
    """

    N_COUNTERS = 4

    def __init__(self, params: np.ndarray, m: np.ndarray, v: np.ndarray, counters: np.ndarray, lock=None):
        self.params, self.m, self.v, self.counters = params, m, v, counters
        self.lock = lock

    @classmethod
    def create(cls, init: np.ndarray, shared: bool = False, ctx=None) -> "SharedOptimizerState":
        n = init.size
        if shared:
            ctx = ctx or mp.get_context("fork")
            arrays = [np.frombuffer(ctx.RawArray("d", max(n, 1)), dtype=np.float64)[:n] for _ in range(3)]
            counters = np.frombuffer(ctx.RawArray("q", cls.N_COUNTERS), dtype=np.int64)
            lock = ctx.Lock()
        else:
            arrays = [np.zeros(n) for _ in range(3)]
            counters = np.zeros(cls.N_COUNTERS, dtype=np.int64)
            lock = None
        arrays[0][:] = init
        return cls(arrays[0], arrays[1], arrays[2], counters, lock)

    @property
    def global_steps(self) -> int:
        return int(self.counters[0])

    @property
    def adam_steps(self) -> int:
        return int(self.counters[1])

    @property
    def skipped(self) -> int:
        return int(self.counters[2])

    @property
    def course_index(self) -> int:
        return int(self.counters[3])

    def snapshot(self) -> np.ndarray:
        if self.lock is None:
            return self.params.copy()
        with self.lock:
            return self.params.copy()

    def state_dict(self) -> dict:
        return {"params": self.params.copy(), "m": self.m.copy(), "v": self.v.copy(),
                "counters": self.counters.copy()}


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is not None and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


def shared_adam_step(shared: SharedOptimizerState, grad: np.ndarray, config: TrainConfig,
                     env_steps: int = 0) -> bool:
    """Apply one Adam update with L2 weight decay to the shared store.

    Returns False (and counts a skip) when the gradient has a non-finite
    entry; the parameters are then left untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != shared.params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {shared.params.shape}")
    lock = shared.lock
    if lock is not None:
        lock.acquire()
    try:
        shared.counters[0] += env_steps
        if not np.all(np.isfinite(grad)):
            shared.counters[2] += 1
            return False
        b1, b2 = config.adam_betas
        g = grad + config.weight_decay * shared.params
        shared.counters[1] += 1
        t = int(shared.counters[1])
        shared.m *= b1
        shared.m += (1.0 - b1) * g
        shared.v *= b2
        shared.v += (1.0 - b2) * g * g
        m_hat = shared.m / (1.0 - b1 ** t)
        v_hat = shared.v / (1.0 - b2 ** t)
        shared.params -= config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        return True
    finally:
        if lock is not None:
            lock.release()


# --------------------------------------------------------------------------
# curriculum and evaluation
# --------------------------------------------------------------------------

@dataclass
class EvalStats:
    course: int
    rewards: list
    lengths: list
    solved: list
    steps: int

    @property
    def episodes(self) -> int:
        return len(self.rewards)

    @property
    def success_ratio(self) -> float:
        return float(np.mean(self.solved)) if self.solved else 0.0

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.rewards)) if self.rewards else float("nan")

    def as_dict(self) -> dict:
        return {"course": self.course, "episodes": self.episodes, "solved": int(sum(self.solved)),
                "success_ratio": self.success_ratio, "mean_reward": self.mean_reward,
                "mean_length": float(np.mean(self.lengths)) if self.lengths else float("nan")}


def curriculum_advance(stats: EvalStats, course_index: int, n_courses: int, threshold: float = 0.9) -> int:
    """Next course index: advance on success ratio >= threshold, never regress."""
    if stats.episodes and stats.success_ratio >= threshold and course_index < n_courses - 1:
        return course_index + 1
    return course_index


def world_for_episode(size: int, seed: int, density: float) -> gw.World:
    return gw.generate_world(size, seed, density=density)


def evaluate(params: ModelParams, size: int, length: int = 3000, seed: int = 0,
             density: float = 0.2, max_episode_steps: int = gw.MAX_STEPS,
             mode: str = "greedy") -> EvalStats:
    """Run back-to-back episodes on fresh worlds for ``length`` env steps.

    Only episodes that finish inside the window are counted.
    """
    rng = np.random.default_rng(seed)
    rewards, lengths, solved = [], [], []
    used = 0
    while used < length:
        world = world_for_episode(size, int(rng.integers(2**31)), density)
        state, obs = gw.reset(world, int(rng.integers(2**31)))
        mstate = initial_state(params, state.pose)
        total = 0.0
        while not state.done and used < length:
            pi, _, mstate = forward(params, mstate, obs)
            a = act(pi, mode, rng)
            state, r, obs = gw.step(state, a, max_steps=max_episode_steps)
            total += r
            used += 1
        if state.done:
            rewards.append(total)
            lengths.append(state.steps)
            solved.append(bool(state.solved))
    return EvalStats(size, rewards, lengths, solved, used)


# --------------------------------------------------------------------------
# workers
# --------------------------------------------------------------------------

def information_gain(before: np.ndarray, after: np.ndarray) -> float:
    """Drop in total binary entropy of the read-out map between two memories."""
    def ent(m):
        p = np.clip(mem.readout_map(m), 1e-12, 1 - 1e-12)
        return float(-(p * np.log(p) + (1 - p) * np.log(1 - p)).sum())
    return ent(before) - ent(after)


class Worker:
    """One actor-learner: owns an environment, model state and RNG."""

    def __init__(self, worker_id: int, shared: SharedOptimizerState, config: TrainConfig,
                 template: ModelParams, sink=None):
        self.id = worker_id
        self.shared = shared
        self.config = config
        self.params = template.copy()
        self.rng = np.random.default_rng([config.seed, worker_id, 0xA3C])
        self.sink = sink
        self.env_state = None
        self.obs = None
        self.mstate = None
        self.episode_reward = 0.0
        self.last_loss: LossParts | None = None
        self.last_grad_norm = 0.0

    def _new_episode(self) -> None:
        size = self.config.courses[self.shared.course_index]
        world = world_for_episode(size, int(self.rng.integers(2**31)), self.config.density)
        self.env_state, self.obs = gw.reset(world, int(self.rng.integers(2**31)))
        self.mstate = initial_state(self.params, self.env_state.pose)
        self.episode_reward = 0.0

    def rollout_and_update(self) -> int:
        """One rollout of at most K steps followed by one shared update."""
        cfg = self.config
        self.params.load_flat(self.shared.snapshot())
        if self.env_state is None or self.env_state.done:
            self._new_episode()
        buf = RolloutBuffer()
        finished = []
        with ad.Tape() as tape:
            state = self.mstate
            for _ in range(cfg.rollout):
                mem_before = state.memory
                pi, value, state = forward(self.params, state, self.obs)
                a = act(pi, "sample", self.rng)
                before = self.env_state
                self.env_state, r, obs = gw.step(before, a, max_steps=cfg.max_episode_steps)
                if cfg.reward_mode == "information_gain" and mem_before is not None:
                    # swap the ground-truth exploration term for the memory's own gain
                    n_new = int(self.env_state.observed.sum() - before.observed.sum())
                    gain = information_gain(mem_before.data, state.memory.data)
                    r += (gain - n_new) * gw.CELL_BONUS
                buf.add(self.obs, a, r, value, state.extras["log_pi"], pi)
                self.episode_reward += r
                self.obs = obs
                if self.env_state.done:
                    finished.append((self.episode_reward, self.env_state.steps, self.env_state.solved))
                    break
            if self.env_state.done:
                buf.terminal, buf.bootstrap = True, 0.0
            else:
                _, v_next, _ = forward(self.params, state.detached(), self.obs)
                buf.bootstrap = float(v_next.data.reshape(-1)[0])
            returns = nstep_returns(buf.rewards, buf.bootstrap, cfg.gamma)
            parts = a3c_loss(buf, returns, cfg.entropy_coef, cfg.value_coef)
        ad.backward(tape, parts.total)
        grad, norm = clip_by_norm(self.params.flat_grad(), cfg.grad_clip)
        shared_adam_step(self.shared, grad, cfg, env_steps=len(buf))
        self.mstate = state.detached()
        self.last_loss, self.last_grad_norm = parts, norm
        for reward, length, solved in finished:
            self._emit({"type": "episode", "global_step": self.shared.global_steps,
                        "course": cfg.courses[self.shared.course_index], "worker": self.id,
                        "reward": reward, "length": length, "solved": bool(solved),
                        "loss_policy": parts.policy, "loss_value": parts.value,
                        "entropy": parts.entropy, "grad_norm": norm})
        return len(buf)

    def _emit(self, record: dict) -> None:
        if self.sink is not None:
            self.sink(record)


def worker_loop(worker_id: int, shared: SharedOptimizerState, config: TrainConfig,
                template: ModelParams, sink=None) -> int:
    """Run updates until the global step budget is spent; returns local steps."""
    w = Worker(worker_id, shared, config, template, sink)
    done = 0
    while shared.global_steps < config.total_steps:
        done += w.rollout_and_update()
    return done


def _mp_worker(worker_id, shared, config, template, queue):
    logging.basicConfig(level=logging.WARNING)
    try:
        worker_loop(worker_id, shared, config, template, sink=queue.put)
    except Exception as err:  # diagnostics only; siblings keep running
        queue.put({"type": "worker_error", "worker": worker_id, "error": repr(err)})
        raise


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    evals: list
    episodes: list
    skipped_updates: int
    global_steps: int
    course_index: int
    wall_time: float
    cpu_time: float = 0.0


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def __call__(self, record: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(config: TrainConfig, init: ModelParams | None = None, callback=None) -> TrainResult:
    """Train from scratch (or from ``init``) until ``config.total_steps``."""
    t0 = time.time()
    cpu0 = _cpu_seconds()
    variant = Variant.parse(config.variant)
    template = init.copy() if init is not None else ModelParams.create(variant, config.arch, seed=config.seed)
    logger = _Logger(config.log_path)
    evals: list = []
    episodes: list = []

    def record(rec):
        if rec.get("type") == "episode":
            episodes.append(rec)
        logger(rec)

    multi = config.workers > 1
    shared = SharedOptimizerState.create(template.flat(), shared=multi)
    eval_params = template.copy()
    next_eval = config.eval_interval
    eval_steps: list = []
    next_ckpt = config.checkpoint_every or None

    def run_eval():
        at = shared.global_steps
        eval_params.load_flat(shared.snapshot())
        course = shared.course_index
        size = config.courses[course]
        stats = evaluate(eval_params, size, config.eval_length,
                         seed=hash_seed(config.seed, len(evals)), density=config.density,
                         max_episode_steps=config.max_episode_steps)
        evals.append(stats)
        eval_steps.append(at)
        new_course = curriculum_advance(stats, course, len(config.courses), config.curriculum_threshold)
        shared.counters[3] = new_course
        logger({"type": "eval", "global_step": shared.global_steps, **stats.as_dict(),
                "next_course": config.courses[new_course]})
        if callback is not None:
            callback(stats, shared)

    def maybe_checkpoint():
        nonlocal next_ckpt
        if next_ckpt is not None and config.checkpoint_dir and shared.global_steps >= next_ckpt:
            p = template.copy()
            p.load_flat(shared.snapshot())
            Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(config.checkpoint_dir) / f"step_{shared.global_steps:09d}.npz", p,
                            step=shared.global_steps, seeds=[config.seed])
            next_ckpt += config.checkpoint_every

    if template.variant is Variant.RANDOM or config.total_steps <= 0:
        multi = False
    if not multi:
        if template.variant is not Variant.RANDOM and config.total_steps > 0:
            w = Worker(0, shared, config, template, sink=record)
            while shared.global_steps < config.total_steps:
                w.rollout_and_update()
                if shared.global_steps >= next_eval:
                    run_eval()
                    next_eval += config.eval_interval
                maybe_checkpoint()
    else:
        ctx = mp.get_context("fork")
        queue = ctx.Queue()
        procs = [ctx.Process(target=_mp_worker, args=(i, shared, config, template, queue), daemon=True)
                 for i in range(config.workers)]
        for p in procs:
            p.start()
        try:
            while any(p.is_alive() for p in procs):
                _drain(queue, record)
                if shared.global_steps >= next_eval:
                    run_eval()
                    next_eval += config.eval_interval
                maybe_checkpoint()
                time.sleep(0.05)
        finally:
            for p in procs:
                p.join(timeout=5)
                if p.is_alive():
                    p.terminate()
            _drain(queue, record)
    final = template.copy()
    final.load_flat(shared.params.copy())
    if not eval_steps or eval_steps[-1] < shared.global_steps:
        run_eval()
    logger.close()
    return TrainResult(final, evals, episodes, shared.skipped, shared.global_steps,
                       shared.course_index, time.time() - t0, _cpu_seconds() - cpu0)


def _cpu_seconds() -> float:
    # this process plus every reaped worker process
    own = resource.getrusage(resource.RUSAGE_SELF)
    kids = resource.getrusage(resource.RUSAGE_CHILDREN)
    return own.ru_utime + own.ru_stime + kids.ru_utime + kids.ru_stime


def _drain(queue, record) -> None:
    import queue as _q
    while True:
        try:
            rec = queue.get_nowait()
        except _q.Empty:
            return
        if rec.get("type") == "worker_error":
            log.error("worker %s died: %s", rec["worker"], rec["error"])
        record(rec)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["courses"] = list(config.courses)
    d["memory_shape"] = list(config.memory_shape)
    d["adam_betas"] = list(config.adam_betas)
    return d


__all__ = [
    "TrainConfig", "RolloutBuffer", "nstep_returns", "a3c_loss", "entropy", "SharedOptimizerState",
    "shared_adam_step", "curriculum_advance", "evaluate", "worker_loop", "train", "TrainResult",
    "EvalStats", "clip_by_norm", "Worker", "information_gain",
]
