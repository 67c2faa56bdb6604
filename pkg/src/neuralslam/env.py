"""Procedurally generated grid worlds for exploration.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; North
points towards decreasing ``y``. Occupancy arrays are indexed ``[y, x]``.

The sensor sees a 3-wide, 5-deep window in front of the agent, starting at
the agent's own row. Occlusion is decided by a centre-to-centre line of
sight: every cell the segment touches (including cells only touched at a
corner) must be free, except the target itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

FREE, WALL, UNKNOWN = 0.0, 1.0, 0.5
WINDOW_DEPTH, WINDOW_WIDTH = 5, 3
N_SENSOR = WINDOW_DEPTH * WINDOW_WIDTH
MAX_STEPS = 750

STEP_COST = -0.04
COLLISION_COST = -0.96
COMPLETION_BONUS = 10.0
CELL_BONUS = 1.0 / N_SENSOR


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


class Action(IntEnum):
    STAND_STILL = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    GO_STRAIGHT = 3


N_ACTIONS = len(Action)

# unit vector (dx, dy) per heading
FORWARD = {Heading.NORTH: (0, -1), Heading.EAST: (1, 0), Heading.SOUTH: (0, 1), Heading.WEST: (-1, 0)}


class WorldGenerationError(RuntimeError):
    pass


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardScheme:
    step: float = STEP_COST
    collision: float = COLLISION_COST
    completion: float = COMPLETION_BONUS
    cell: float = CELL_BONUS


GRIDWORLD_REWARDS = RewardScheme()
# the 3D-simulation reward scale, kept only as a preset
GAZEBO_REWARDS = RewardScheme(step=-0.005, collision=-0.05, completion=1.0, cell=0.1 * CELL_BONUS)


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: Heading

    def __post_init__(self):
        object.__setattr__(self, "heading", Heading(self.heading))


@dataclass(frozen=True, eq=False)
class World:
    occupancy: np.ndarray  # bool [H, W], True = wall
    start_pose: AgentPose | None = None
    observable: np.ndarray = field(default=None, repr=False)  # bool [H, W]

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        if self.observable is None:
            object.__setattr__(self, "observable", observable_cells(occ))
        self.observable.setflags(write=False)
        # per-pose visibility and sensor readings, filled lazily
        object.__setattr__(self, "_views", {})

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def is_wall(self, x: int, y: int) -> bool:
        if not (0 <= x < self.width and 0 <= y < self.height):
            return True
        return bool(self.occupancy[y, x])

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.occupancy)
        return list(zip(xs.tolist(), ys.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, World):
            return NotImplemented
        return (self.occupancy.shape == other.occupancy.shape
                and bool(np.array_equal(self.occupancy, other.occupancy))
                and self.start_pose == other.start_pose)

    def __hash__(self) -> int:
        return hash((self.occupancy.tobytes(), self.occupancy.shape, self.start_pose))


@dataclass(frozen=True)
class Observation:
    sensor: np.ndarray  # (15,) laid out [depth, lateral] with lateral left..right
    last_action: int


@dataclass(frozen=True, eq=False)
class EpisodeState:
    world: World
    pose: AgentPose
    observed: np.ndarray  # bool [H, W]
    steps: int = 0
    done: bool = False
    solved: bool = False


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def window_offsets(heading: Heading) -> list[tuple[int, int]]:
    """World-frame (dx, dy) offsets of the 15 window cells, in sensor order."""
    fx, fy = FORWARD[Heading(heading)]
    # left of forward: rotate (fx, fy) by -90 deg in y-down coordinates
    lx, ly = fy, -fx
    out = []
    for depth in range(WINDOW_DEPTH):
        for lateral in (1, 0, -1):  # left, centre, right
            out.append((depth * fx + lateral * lx, depth * fy + lateral * ly))
    return out


def supercover(dx: int, dy: int) -> list[tuple[int, int]]:
    """Cells touched by the segment from (0, 0) to (dx, dy), endpoints excluded.

    Cells are unit squares centred on integer points. A segment passing
    exactly through a grid corner touches both cells diagonal to its path.
    """
    n = max(abs(dx), abs(dy))
    if n <= 1 and (abs(dx) + abs(dy)) <= 1:
        return []
    cells: set[tuple[int, int]] = set()
    # walk the segment through every grid-line crossing
    ts = {0.0, 1.0}
    for k in range(-abs(dx) - 1, abs(dx) + 2):
        if dx:
            ts.add((k + 0.5) / dx)
    for k in range(-abs(dy) - 1, abs(dy) + 2):
        if dy:
            ts.add((k + 0.5) / dy)
    ts = sorted(t for t in ts if 0.0 <= t <= 1.0)
    for t0, t1 in zip(ts, ts[1:]):
        tm = 0.5 * (t0 + t1)
        cells.add((int(np.floor(tm * dx + 0.5)), int(np.floor(tm * dy + 0.5))))
    for t in ts:
        px, py = t * dx, t * dy
        fx, fy = px + 0.5, py + 0.5
        on_x = abs(fx - round(fx)) < 1e-12
        on_y = abs(fy - round(fy)) < 1e-12
        if on_x and on_y:
            cx, cy = int(round(fx)), int(round(fy))
            cells.update({(cx - 1, cy - 1), (cx, cy - 1), (cx - 1, cy), (cx, cy)})
    cells.discard((0, 0))
    cells.discard((dx, dy))
    return sorted(cells)


@lru_cache(maxsize=None)
def _window_geometry(heading: int) -> tuple:
    offsets = window_offsets(Heading(heading))
    blockers = tuple(tuple(supercover(dx, dy)) for dx, dy in offsets)
    return tuple(offsets), blockers


def _scan(world, pose: AgentPose) -> dict[tuple[int, int], bool]:
    offsets, blockers = _window_geometry(int(pose.heading))
    out = {}
    for (dx, dy), block in zip(offsets, blockers):
        x, y = pose.x + dx, pose.y + dy
        if not (0 <= x < world.width and 0 <= y < world.height):
            continue
        if any(world.is_wall(pose.x + bx, pose.y + by) for bx, by in block):
            continue
        out[(x, y)] = bool(world.occupancy[y, x])
    return out


def _view(world: World, pose: AgentPose):
    """Cached ``(visible, xs, ys, reading)`` for one pose of a world."""
    key = (pose.x, pose.y, int(pose.heading))
    hit = world._views.get(key)
    if hit is not None:
        return hit
    vis = _scan(world, pose)
    offsets, _ = _window_geometry(int(pose.heading))
    reading = np.full(N_SENSOR, UNKNOWN)
    for i, (dx, dy) in enumerate(offsets):
        cell = (pose.x + dx, pose.y + dy)
        if cell in vis:
            reading[i] = WALL if vis[cell] else FREE
    reading.setflags(write=False)
    xs = np.array([c[0] for c in vis], dtype=np.intp)
    ys = np.array([c[1] for c in vis], dtype=np.intp)
    hit = world._views[key] = (vis, xs, ys, reading)
    return hit


def visible_cells(world: World, pose: AgentPose) -> dict[tuple[int, int], bool]:
    """Visible window cells mapped to their occupancy (True = wall)."""
    return dict(_view(world, pose)[0])


def sense(world: World, pose: AgentPose) -> np.ndarray:
    """The 15-value sensor reading for ``pose``."""
    return _view(world, pose)[3].copy()


def observable_cells(occupancy: np.ndarray) -> np.ndarray:
    """Union of visible cells over every free cell and heading."""
    occ = np.asarray(occupancy, dtype=bool)
    tmp = _BareWorld(occ)
    seen = np.zeros_like(occ)
    ys, xs = np.nonzero(~occ)
    for x, y in zip(xs.tolist(), ys.tolist()):
        for h in Heading:
            for (cx, cy) in visible_cells(tmp, AgentPose(x, y, h)):
                seen[cy, cx] = True
    return seen


class _BareWorld:
    # minimal stand-in used while a World is being constructed
    def __init__(self, occ: np.ndarray):
        self.occupancy = occ
        self.height, self.width = occ.shape
        self._views = {}

    def is_wall(self, x: int, y: int) -> bool:
        if not (0 <= x < self.width and 0 <= y < self.height):
            return True
        return bool(self.occupancy[y, x])


def is_connected(occupancy: np.ndarray) -> bool:
    free = ~np.asarray(occupancy, dtype=bool)
    if not free.any():
        return False
    _, n = ndimage.label(free)  # 4-connectivity
    return n == 1


# --------------------------------------------------------------------------
# generation and episodes
# --------------------------------------------------------------------------

def generate_world(
    size: int,
    seed: int,
    density: float = 0.2,
    min_observable: float = 0.5,
    max_tries: int = 1000,
    fix_start: bool = False,
) -> World:
    """Sample i.i.d. obstacles until free space is connected.

    Worlds whose observable area falls below ``min_observable`` of all
    cells are rejected as well. With ``fix_start`` a start pose is drawn
    from the same generator and stored in the world.
    """
    if not 8 <= size <= 16:
        raise ValueError(f"world size must be in 8..16, got {size}")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        occ = rng.random((size, size)) < density
        if not is_connected(occ):
            continue
        observable = observable_cells(occ)
        if observable.sum() < min_observable * occ.size:
            continue
        start = None
        if fix_start:
            start = _random_pose(occ, rng)
        return World(occ, start_pose=start, observable=observable)
    raise WorldGenerationError(
        f"no connected {size}x{size} world after {max_tries} tries (density={density})")


def _random_pose(occ: np.ndarray, rng: np.random.Generator) -> AgentPose:
    ys, xs = np.nonzero(~occ)
    i = int(rng.integers(len(xs)))
    h = int(rng.integers(4))
    return AgentPose(int(xs[i]), int(ys[i]), Heading(h))


def reset(world: World, seed: int | None = None, pose: AgentPose | None = None):
    """Start an episode; returns ``(state, observation)``.

    The pose is ``pose`` if given, else drawn uniformly over free cells and
    headings from ``seed``. No exploration reward is granted for the cells
    seen at the start.
    """
    if pose is None:
        pose = _random_pose(world.occupancy, np.random.default_rng(seed))
    if world.is_wall(pose.x, pose.y):
        raise ValueError(f"start pose {pose} is not on a free cell")
    observed = np.zeros(world.shape, dtype=bool)
    for (x, y) in visible_cells(world, pose):
        observed[y, x] = True
    state = EpisodeState(world, pose, observed)
    solved = bool(np.all(observed[world.observable]))
    if solved:
        state = replace(state, done=True, solved=True)
    return state, Observation(sense(world, pose), int(Action.STAND_STILL))


def _move(world: World, pose: AgentPose, action: int) -> tuple[AgentPose, bool]:
    if action == Action.STAND_STILL:
        return pose, False
    if action == Action.TURN_LEFT:
        return AgentPose(pose.x, pose.y, Heading((pose.heading - 1) % 4)), False
    if action == Action.TURN_RIGHT:
        return AgentPose(pose.x, pose.y, Heading((pose.heading + 1) % 4)), False
    if action == Action.GO_STRAIGHT:
        dx, dy = FORWARD[pose.heading]
        nx, ny = pose.x + dx, pose.y + dy
        if world.is_wall(nx, ny):
            return pose, True
        return AgentPose(nx, ny, pose.heading), False
    raise ValueError(f"unknown action {action!r}")


def step(state: EpisodeState, action: int, rewards: RewardScheme = GRIDWORLD_REWARDS,
         max_steps: int = MAX_STEPS):
    """Advance one step; returns ``(state, reward, observation)``.

    ``state`` is not modified.
    """
    if state.done:
        raise EpisodeFinished("step() called on a finished episode")
    action = int(action)
    world = state.world
    pose, collided = _move(world, state.pose, action)
    _, xs, ys, reading = _view(world, pose)
    observed = state.observed.copy()
    new = int(len(xs) - np.count_nonzero(observed[ys, xs]))
    observed[ys, xs] = True
    solved = bool(np.all(observed[world.observable]))
    reward = rewards.step + new * rewards.cell
    if collided:
        reward += rewards.collision
    if solved:
        reward += rewards.completion
    steps = state.steps + 1
    done = solved or steps >= max_steps
    nxt = EpisodeState(world, pose, observed, steps, done, solved)
    return nxt, reward, Observation(reading.copy(), action)


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

_HEADING_CHARS = "NESW"


def render_world(world: World) -> str:
    lines = [f"{world.width} {world.height}"]
    for row in world.occupancy:
        lines.append("".join("#" if c else "." for c in row))
    if world.start_pose is not None:
        p = world.start_pose
        lines.append(f"S {p.x} {p.y} {_HEADING_CHARS[p.heading]}")
    return "\n".join(lines) + "\n"


def parse_world(text: str) -> World:
    """Parse the ``W H`` / rows / optional ``S x y h`` text format."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty world file")
    try:
        w, h = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"bad world header {lines[0]!r}") from None
    rows = lines[1:1 + h]
    if len(rows) != h or any(len(r) != w or set(r) - set("#.") for r in rows):
        raise ValueError("world rows do not match the declared size or contain bad characters")
    occ = np.array([[c == "#" for c in r] for r in rows], dtype=bool)
    start = None
    rest = lines[1 + h:]
    if rest:
        parts = rest[0].split()
        if len(parts) != 4 or parts[0] != "S":
            raise ValueError(f"bad start line {rest[0]!r}")
        hd = parts[3]
        heading = Heading(_HEADING_CHARS.index(hd)) if hd in _HEADING_CHARS else Heading(int(hd))
        start = AgentPose(int(parts[1]), int(parts[2]), heading)
        if occ[start.y, start.x]:
            raise ValueError("start pose lies on a wall")
    return World(occ, start_pose=start)


def load_world(path) -> World:
    return parse_world(Path(path).read_text())


def save_world(world: World, path) -> None:
    Path(path).write_text(render_world(world))
