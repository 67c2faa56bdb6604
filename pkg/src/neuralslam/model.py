"""Agent networks: the SLAM-structured memory agent and its baselines.

All variants share the interface::

    params = ModelParams.create("neural_slam", seed=0)
    state = initial_state(params, start_pose)
    pi, value, state = forward(params, state, obs)

``forward`` records onto the active tape when one is open, which is how
the trainer backpropagates through a rollout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import memory as mem
from .autodiff import Parameter, Tensor
from .env import N_ACTIONS, N_SENSOR, AgentPose, Observation

CHECKPOINT_FORMAT = "neuralslam-checkpoint"
CHECKPOINT_VERSION = 1


class Variant(str, Enum):
    NEURAL_SLAM = "neural_slam"
    A3C = "a3c"
    A3C_NAV1 = "a3c_nav1"
    A3C_NAV2 = "a3c_nav2"
    A3C_EXT = "a3c_ext"
    RANDOM = "random"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"neuralslam": "neural_slam", "slam": "neural_slam"}
        return cls(aliases.get(key, key))

    @property
    def has_memory(self) -> bool:
        return self in (Variant.NEURAL_SLAM, Variant.A3C_EXT)

    @property
    def stacked(self) -> bool:
        return self in (Variant.A3C_NAV1, Variant.A3C_NAV2)


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    hidden: int = 128
    memory_shape: tuple = (16, 16)
    channels: int = 32
    prior_sigma: float = mem.DEFAULT_PRIOR_SIGMA
    circular_shift: bool = True

    @property
    def write_controls(self) -> int:
        return 3 * self.channels + 12

    @property
    def read_controls(self) -> int:
        return self.channels + 12


TOY_ARCH = ArchConfig(hidden=8, memory_shape=(4, 4), channels=4)


def _layer_shapes(variant: Variant, arch: ArchConfig) -> dict[str, tuple]:
    h, C = arch.hidden, arch.channels
    shapes: dict[str, tuple] = {}
    if variant is Variant.RANDOM:
        return shapes
    lstm_in = N_SENSOR if variant in (Variant.NEURAL_SLAM, Variant.A3C_EXT, Variant.A3C_NAV2) \
        else N_SENSOR + N_ACTIONS
    shapes["lstm.W"] = (4 * h, lstm_in + h)
    shapes["lstm.b"] = (4 * h,)
    if variant.stacked:
        in2 = h + N_ACTIONS if variant is Variant.A3C_NAV2 else h
        shapes["lstm2.W"] = (4 * h, in2 + h)
        shapes["lstm2.b"] = (4 * h,)
    out_in = h
    if variant.has_memory:
        head_in = h + N_ACTIONS if variant is Variant.A3C_EXT else h
        shapes["write.W"] = (arch.write_controls, head_in)
        shapes["write.b"] = (arch.write_controls,)
        shapes["read.W"] = (arch.read_controls, head_in)
        shapes["read.b"] = (arch.read_controls,)
        out_in = h + C
    shapes["pi.W"] = (N_ACTIONS, out_in)
    shapes["pi.b"] = (N_ACTIONS,)
    shapes["v.W"] = (1, out_in)
    shapes["v.b"] = (1,)
    return shapes


@dataclass
class ModelParams:
    variant: Variant
    arch: ArchConfig
    params: dict  # name -> Parameter, insertion order is the flat layout

    @classmethod
    def create(cls, variant="neural_slam", arch: ArchConfig | None = None, seed: int = 0,
               zero: bool = False, dtype=np.float64) -> "ModelParams":
        """Fresh parameters: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
        biases zero except the LSTM forget gate bias (1.0)."""
        variant = Variant.parse(variant)
        arch = arch or ArchConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _layer_shapes(variant, arch).items():
            if zero:
                data = np.zeros(shape)
            elif name.endswith(".W"):
                bound = 1.0 / np.sqrt(shape[1])
                data = rng.uniform(-bound, bound, size=shape)
            else:
                data = np.zeros(shape)
                if name.startswith("lstm"):
                    hsz = shape[0] // 4
                    data[hsz:2 * hsz] = 1.0
            params[name] = Parameter(name, data.astype(dtype))
        return cls(variant, arch, params)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def shapes(self) -> dict[str, tuple]:
        return {k: p.shape for k, p in self.params.items()}

    def flat(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params.values():
            n = p.size
            p.data = np.array(vec[i:i + n], dtype=p.data.dtype).reshape(p.shape)
            i += n

    def flat_grad(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([p.grad.reshape(-1) for p in self.params.values()])

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.arch,
                           {k: Parameter(k, p.data.copy()) for k, p in self.params.items()})


@dataclass
class ModelState:
    h: Tensor | None = None
    c: Tensor | None = None
    h2: Tensor | None = None
    c2: Tensor | None = None
    memory: Tensor | None = None  # (H*W, C)
    w_write: Tensor | None = None  # (H, W)
    w_read: Tensor | None = None
    prev_action: int = 0
    extras: dict = field(default_factory=dict)

    def detached(self) -> "ModelState":
        """Same values, cut from any tape (truncates backprop between rollouts)."""
        def d(t):
            return None if t is None else Tensor(t.data.copy())
        return replace(self, h=d(self.h), c=d(self.c), h2=d(self.h2), c2=d(self.c2),
                       memory=d(self.memory), w_write=d(self.w_write), w_read=d(self.w_read),
                       extras={})

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("h", "c", "h2", "c2", "memory", "w_write", "w_read"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t.data
        return out


def initial_state(params: ModelParams, start_pose: AgentPose) -> ModelState:
    """Zero LSTM state and memory; both access weights at the start prior."""
    arch, v = params.arch, params.variant
    state = ModelState(prev_action=0)
    if v is Variant.RANDOM:
        return state
    z = np.zeros(arch.hidden)
    state.h, state.c = Tensor(z.copy()), Tensor(z.copy())
    if v.stacked:
        state.h2, state.c2 = Tensor(z.copy()), Tensor(z.copy())
    if v.has_memory:
        H, W = arch.memory_shape
        state.memory = Tensor(np.zeros((H * W, arch.channels)))
        prior = mem.init_prior(start_pose, arch.memory_shape, arch.prior_sigma)
        state.w_write = Tensor(prior.copy())
        state.w_read = Tensor(prior.copy())
    return state


def _check(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite activation in layer {name!r}")
    return t


def _linear(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matvec(params[prefix + ".W"], x), params[prefix + ".b"])


def _lstm(params: ModelParams, prefix: str, x: Tensor, h: Tensor, c: Tensor):
    hs = h.shape[0]
    z = _linear(params, prefix, ad.concat([x, h]))
    i = ad.sigmoid(ad.getitem(z, slice(0, hs)))
    f = ad.sigmoid(ad.getitem(z, slice(hs, 2 * hs)))
    g = ad.tanh(ad.getitem(z, slice(2 * hs, 3 * hs)))
    o = ad.sigmoid(ad.getitem(z, slice(3 * hs, 4 * hs)))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return _check(prefix, h_new), c_new


def split_controls(raw: Tensor, channels: int, write: bool) -> dict[str, Tensor]:
    """Squash a head's linear output into its control variables."""
    C = channels
    sl = lambda a, b: ad.getitem(raw, slice(a, b))  # noqa: E731
    ctl = {
        "key": sl(0, C),
        "strength": ad.softplus(sl(C, C + 1)),
        "gate": ad.sigmoid(sl(C + 1, C + 2)),
        "kernel": ad.reshape(ad.softmax(sl(C + 2, C + 11)), (3, 3)),
        "sharpen": ad.add(1.0, ad.softplus(sl(C + 11, C + 12))),
    }
    if write:
        ctl["erase"] = ad.sigmoid(sl(C + 12, 2 * C + 12))
        ctl["add"] = sl(2 * C + 12, 3 * C + 12)
    return ctl


def _one_hot(a: int) -> np.ndarray:
    v = np.zeros(N_ACTIONS)
    v[int(a)] = 1.0
    return v


def forward(params: ModelParams, state: ModelState, obs: Observation, priors=None):
    """One agent step. Returns ``(pi, value, new_state)`` as tensors.

    ``state`` is not modified. ``new_state.extras`` holds the log-policy and
    the per-stage access weights of both heads for inspection. ``priors``
    replaces the motion-predicted (write, read) weights with given arrays,
    which lets finite-difference checks hold the stopped belief path fixed.
    """
    v = params.variant
    if v is Variant.RANDOM:
        pi = Tensor(np.full(N_ACTIONS, 1.0 / N_ACTIONS))
        return pi, Tensor(np.zeros(1)), replace(state, prev_action=int(obs.last_action), extras={
            "log_pi": Tensor(np.log(pi.data))})

    sensor = Tensor(np.asarray(obs.sensor, dtype=np.float64))
    action_vec = Tensor(_one_hot(obs.last_action))
    extras: dict = {}
    new = replace(state, prev_action=int(obs.last_action), extras=extras)

    if v in (Variant.A3C, Variant.A3C_NAV1):
        x = ad.concat([sensor, action_vec])
    else:
        x = sensor
    h, c = _lstm(params, "lstm", x, state.h, state.c)
    new.h, new.c = h, c
    top = h
    if v.stacked:
        x2 = ad.concat([h, action_vec]) if v is Variant.A3C_NAV2 else h
        h2, c2 = _lstm(params, "lstm2", x2, state.h2, state.c2)
        new.h2, new.c2 = h2, c2
        top = h2

    if v.has_memory:
        arch = params.arch
        head_in = ad.concat([h, action_vec]) if v is Variant.A3C_EXT else h
        if priors is not None:
            prior_w, prior_r = Tensor(np.asarray(priors[0])), Tensor(np.asarray(priors[1]))
        elif v is Variant.NEURAL_SLAM:
            prior_w = Tensor(mem.motion_predict(state.w_write.data, obs.last_action))
            prior_r = Tensor(mem.motion_predict(state.w_read.data, obs.last_action))
        else:
            prior_w, prior_r = state.w_write, state.w_read
        wctl = split_controls(_check("write", _linear(params, "write", head_in)), arch.channels, True)
        rctl = split_controls(_check("read", _linear(params, "read", head_in)), arch.channels, False)

        wstages = mem.address(state.memory, prior_w, wctl["key"], wctl["strength"], wctl["gate"],
                              wctl["kernel"], wctl["sharpen"], arch.circular_shift)
        memory = _check("memory", mem.write(state.memory, wstages["weight"], wctl["erase"], wctl["add"]))
        rstages = mem.address(memory, prior_r, rctl["key"], rctl["strength"], rctl["gate"],
                              rctl["kernel"], rctl["sharpen"], arch.circular_shift)
        r = _check("read_vector", mem.read(memory, rstages["weight"]))
        new.memory, new.w_write, new.w_read = memory, wstages["weight"], rstages["weight"]
        extras.update(write_prior=prior_w, read_prior=prior_r, write_stages=wstages,
                      read_stages=rstages, write_controls=wctl, read_controls=rctl)
        top = ad.concat([h, r])

    logits = _check("pi", _linear(params, "pi", top))
    value = _check("v", _linear(params, "v", top))
    log_pi = ad.log_softmax(logits)
    pi = ad.softmax(logits)
    extras["log_pi"] = log_pi
    return pi, value, new


def act(pi, mode: str = "sample", rng=None) -> int:
    """Draw an action from ``pi`` or take its argmax (lowest index on ties)."""
    p = np.asarray(pi.data if isinstance(pi, Tensor) else pi, dtype=np.float64)
    if np.any(np.isnan(p)):
        raise ValueError("policy contains NaN")
    if mode == "greedy":
        return int(np.argmax(p))
    if mode != "sample":
        raise ValueError(f"unknown action mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    u = rng.random() * p.sum()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    # never pick a zero-probability action through rounding at the top end
    while p[idx] == 0 and idx > 0:
        idx -= 1
    return idx


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, step: int = 0, seeds=(), extra: dict | None = None) -> None:
    """Write a zip container: one float32 little-endian array per parameter
    plus a JSON header with the variant, architecture and training counters."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": params.variant.value,
        "arch": {
            "hidden": params.arch.hidden,
            "memory_shape": list(params.arch.memory_shape),
            "channels": params.arch.channels,
            "prior_sigma": params.arch.prior_sigma,
            "circular_shift": params.arch.circular_shift,
        },
        "step": int(step),
        "seeds": [int(s) for s in seeds],
        "params": [{"name": k, "shape": list(p.shape)} for k, p in params.params.items()],
        "extra": extra or {},
    }
    arrays = {f"param/{k}": p.data.astype("<f4") for k, p in params.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, expect_variant=None) -> tuple[ModelParams, dict]:
    try:
        data = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    with data:
        if "__meta__" not in data.files:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        variant = Variant.parse(meta["variant"])
        if expect_variant is not None and Variant.parse(expect_variant) is not variant:
            raise CheckpointError(f"checkpoint holds a {variant.value} agent, expected {Variant.parse(expect_variant).value}")
        a = meta["arch"]
        arch = ArchConfig(a["hidden"], tuple(a["memory_shape"]), a["channels"], a["prior_sigma"],
                          a["circular_shift"])
        params = ModelParams.create(variant, arch, zero=True)
        for entry in meta["params"]:
            name = entry["name"]
            arr = data[f"param/{name}"].astype(np.float64)
            if name not in params.params or tuple(arr.shape) != params[name].shape:
                raise CheckpointError(f"parameter {name} has unexpected shape {arr.shape}")
            params[name].data = arr
    return params, meta
