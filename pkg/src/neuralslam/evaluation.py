"""Generalisation suites, world sets and replay rendering."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as gw
from . import memory as mem
from .a3c import hash_seed
from .model import ModelParams, Variant, act, forward, initial_state, load_checkpoint

# hard stop for agents run without a step limit
UNLIMITED_STEP_GUARD = 1_000_000


@dataclass
class EpisodeRow:
    world: str
    steps: int
    reward: float
    solved: bool


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)

    def _col(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    @property
    def mean_steps(self) -> float:
        return float(self._col("steps").mean()) if self.rows else float("nan")

    @property
    def std_steps(self) -> float:
        return float(self._col("steps").std()) if self.rows else float("nan")

    @property
    def mean_reward(self) -> float:
        return float(self._col("reward").mean()) if self.rows else float("nan")

    @property
    def std_reward(self) -> float:
        return float(self._col("reward").std()) if self.rows else float("nan")

    @property
    def solved(self) -> int:
        return int(sum(r.solved for r in self.rows))

    @property
    def success_ratio(self) -> float:
        return self.solved / self.n if self.rows else float("nan")

    def summary(self) -> dict:
        return {"episodes": self.n, "mean_steps": self.mean_steps, "std_steps": self.std_steps,
                "mean_reward": self.mean_reward, "std_reward": self.std_reward,
                "solved": self.solved, "success_ratio": self.success_ratio}

    def table_line(self, label: str = "") -> str:
        return (f"{label:<12} {self.mean_steps:.3f} ± {self.std_steps:.3f}   "
                f"{self.mean_reward:.3f} ± {self.std_reward:.3f}   {self.solved}/{self.n}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["world", "steps", "reward", "solved"])
            for r in self.rows:
                w.writerow([r.world, r.steps, repr(r.reward), int(r.solved)])


@dataclass
class RunConfig:
    agent: str = "neural_slam"
    checkpoint: str | None = None
    worlds: str | None = None  # directory of world files
    generate: dict | None = None  # {"n", "size", "seed"} when no directory is given
    seed: int = 0
    step_cap: int | None = gw.MAX_STEPS
    density: float = 0.2

    def __post_init__(self):
        if (self.worlds is None) == (self.generate is None):
            raise ValueError("specify exactly one world source: a world directory or generation parameters")


def world_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"world directory {d} does not exist")
    files = sorted(d.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no world files in {d}")
    return files


def generate_world_set(n: int, size: int, seed: int, out_dir=None, density: float = 0.2) -> list[gw.World]:
    """``n`` worlds with fixed start poses, written as ``world_XXX.txt`` when
    ``out_dir`` is given."""
    if n < 1:
        raise ValueError("n must be >= 1")
    worlds = [gw.generate_world(size, hash_seed(seed, i), density=density, fix_start=True) for i in range(n)]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(worlds):
            gw.save_world(w, out / f"world_{i:03d}.txt")
    return worlds


def load_agent(agent: str, checkpoint=None) -> ModelParams:
    variant = Variant.parse(agent)
    if variant is Variant.RANDOM:
        return ModelParams.create(Variant.RANDOM)
    if checkpoint is None:
        raise ValueError(f"a checkpoint is required for the {variant.value} agent")
    params, _ = load_checkpoint(checkpoint, expect_variant=variant)
    return params


def run_episode(params: ModelParams | None, world: gw.World, seed: int, step_cap: int | None,
                mode: str = "greedy", start: gw.AgentPose | None = None, on_step=None, policy=None):
    """One episode; returns ``(steps, reward, solved)``.

    ``on_step(env_state, model_state, action, reward)`` is called after the
    reset (with action None) and after every step. A scripted ``policy``
    (``policy(env_state, obs) -> action``) replaces the network when given.
    """
    rng = np.random.default_rng(seed)
    pose = start or world.start_pose
    state, obs = gw.reset(world, int(rng.integers(2**31)) if pose is None else None, pose=pose)
    mstate = initial_state(params, state.pose) if policy is None else None
    cap = step_cap if step_cap is not None else UNLIMITED_STEP_GUARD
    total = 0.0
    if on_step is not None:
        on_step(state, mstate, None, 0.0)
    while not state.done:
        if policy is not None:
            a = int(policy(state, obs))
        else:
            pi, _, mstate = forward(params, mstate, obs)
            a = act(pi, "sample" if params.variant is Variant.RANDOM else mode, rng)
        state, r, obs = gw.step(state, a, max_steps=cap)
        total += r
        if on_step is not None:
            on_step(state, mstate, a, r)
    return state.steps, total, bool(state.solved)


def run_suite(config: RunConfig, params: ModelParams | None = None) -> EvalReport:
    """Greedy evaluation, one episode per world from its fixed start pose.

    The Random agent samples uniformly and has no step limit.
    """
    if params is None:
        params = load_agent(config.agent, config.checkpoint)
    elif params.variant is not Variant.parse(config.agent):
        raise ValueError(f"parameters are for {params.variant.value}, config asks for {config.agent}")
    if config.worlds is not None:
        named = [(p.stem, gw.load_world(p)) for p in world_files(config.worlds)]
    else:
        g = config.generate
        ws = generate_world_set(int(g["n"]), int(g["size"]), int(g["seed"]), density=config.density)
        named = [(f"world_{i:03d}", w) for i, w in enumerate(ws)]
    cap = None if params.variant is Variant.RANDOM else config.step_cap
    report = EvalReport()
    for i, (name, world) in enumerate(named):
        steps, reward, solved = run_episode(params, world, hash_seed(config.seed, i), cap)
        report.rows.append(EpisodeRow(name, steps, reward, solved))
    return report


# --------------------------------------------------------------------------
# replay rendering
# --------------------------------------------------------------------------

CELL_PX = 12
_SENSOR_RED = (220, 30, 30)


def _world_image(state: gw.EpisodeState, shape) -> np.ndarray:
    H, W = shape
    img = np.full((H, W, 3), 255, dtype=np.uint8)
    world = state.world
    img[: world.height, : world.width][world.occupancy] = 0
    unexplored = ~state.observed
    img[: world.height, : world.width][unexplored] = 160
    img[world.height:, :] = 90
    img[:, world.width:] = 90
    big = np.kron(img, np.ones((CELL_PX, CELL_PX, 1), dtype=np.uint8))
    p = state.pose
    # agent: grey cell with a dark marker towards its heading
    y0, x0 = p.y * CELL_PX, p.x * CELL_PX
    big[y0:y0 + CELL_PX, x0:x0 + CELL_PX] = 128
    fx, fy = gw.FORWARD[p.heading]
    cy, cx = y0 + CELL_PX // 2 + fy * CELL_PX // 4, x0 + CELL_PX // 2 + fx * CELL_PX // 4
    big[cy - 2:cy + 2, cx - 2:cx + 2] = 0
    # sensing window outline
    cells = mem.footprint(p.x, p.y, p.heading)
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    x1, x2 = max(min(xs), 0) * CELL_PX, min(max(xs) + 1, W) * CELL_PX - 1
    y1, y2 = max(min(ys), 0) * CELL_PX, min(max(ys) + 1, H) * CELL_PX - 1
    big[y1, x1:x2 + 1] = _SENSOR_RED
    big[y2, x1:x2 + 1] = _SENSOR_RED
    big[y1:y2 + 1, x1] = _SENSOR_RED
    big[y1:y2 + 1, x2] = _SENSOR_RED
    return big


def _heat_image(values: np.ndarray) -> np.ndarray:
    """Grayscale, 1.0 maps to white."""
    v = np.clip(values, 0.0, 1.0)
    gray = np.rint(v * 255).astype(np.uint8)
    return np.kron(gray, np.ones((CELL_PX, CELL_PX), dtype=np.uint8))


def normalized_weight(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


def _weight_image(w: np.ndarray) -> np.ndarray:
    w = normalized_weight(w)
    peak = w.max()
    return _heat_image(w / peak if peak > 0 else w)


def replay_render(params: ModelParams, world: gw.World, out_dir, seed: int = 0,
                  step_cap: int | None = gw.MAX_STEPS, mode: str = "greedy",
                  images: bool = True) -> list[dict]:
    """Roll out one episode and write per-step panels.

    Each frame gets ``frame_XXXX_world.png`` and, for memory agents,
    ``_write.png`` / ``_memory.png`` / ``_read.png`` plus matching CSV
    dumps of the underlying numbers. ``transcript.txt`` holds an ASCII log.
    Returns the frame records (L + 1 for an episode of length L).
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames: list[dict] = []
    shape = params.arch.memory_shape if params.variant.has_memory else world.shape

    def on_step(state, mstate, action, reward):
        k = len(frames)
        rec = {"frame": k, "action": action, "reward": reward, "pose": state.pose,
               "observed": int(state.observed.sum())}
        panels = {"world": None}
        if params.variant.has_memory:
            H, W = params.arch.memory_shape
            panels["write"] = normalized_weight(mstate.w_write.data)
            panels["memory"] = mem.readout_map(mstate.memory.data.reshape(H, W, -1))
            panels["read"] = normalized_weight(mstate.w_read.data)
        for name, arr in panels.items():
            try:
                if images:
                    if name == "world":
                        img = _world_image(state, shape)
                        Image.fromarray(img, "RGB").save(out / f"frame_{k:04d}_world.png")
                    elif name == "memory":
                        Image.fromarray(_heat_image(arr), "L").save(out / f"frame_{k:04d}_memory.png")
                    else:
                        Image.fromarray(_weight_image(arr), "L").save(out / f"frame_{k:04d}_{name}.png")
                if arr is not None:
                    np.savetxt(out / f"frame_{k:04d}_{name}.csv", arr, delimiter=",", fmt="%.10g")
            except (OSError, ValueError) as err:
                raise RuntimeError(f"rendering frame {k} panel {name} failed: {err}") from err
            rec[name] = arr
        frames.append(rec)

    steps, reward, solved = run_episode(params, world, seed, step_cap, mode, on_step=on_step)
    with open(out / "transcript.txt", "w") as fh:
        fh.write(f"# agent={params.variant.value} steps={steps} reward={reward:.4f} solved={solved}\n")
        for rec in frames:
            p = rec["pose"]
            act_s = "-" if rec["action"] is None else gw.Action(rec["action"]).name
            fh.write(f"frame {rec['frame']:4d} action={act_s:<11} reward={rec['reward']:+.4f} "
                     f"pose=({p.x},{p.y},{p.heading.name}) observed={rec['observed']}\n")
            fh.write(ascii_frame(world, p) + "\n")
    return frames


def ascii_frame(world: gw.World, pose: gw.AgentPose) -> str:
    arrow = {gw.Heading.NORTH: "^", gw.Heading.EAST: ">", gw.Heading.SOUTH: "v", gw.Heading.WEST: "<"}
    rows = []
    for y in range(world.height):
        row = []
        for x in range(world.width):
            if (x, y) == (pose.x, pose.y):
                row.append(arrow[pose.heading])
            else:
                row.append("#" if world.occupancy[y, x] else ".")
        rows.append("".join(row))
    return "\n".join(rows)
