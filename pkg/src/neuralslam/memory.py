"""External memory and SLAM-structured head addressing.

Access weights are ``(H, W)`` arrays indexed ``[y, x]`` over memory slots,
memory is ``(H, W, C)`` (flattened to ``(H*W, C)`` on the tape). World
coordinates map one-to-one onto memory coordinates with the world's
top-left cell at slot ``(0, 0)``.

Belief transforms (prior, localisation, motion prediction) are plain numpy
and carry no gradient. The measurement update, write and read act on
:class:`~neuralslam.autodiff.Tensor` values and are differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import FORWARD, AgentPose, Action, Heading, window_offsets

COSINE_EPS = 1e-8
SHARPEN_EPS = 1e-12
DEFAULT_PRIOR_SIGMA = 0.8


class AddressingError(ValueError):
    pass


@dataclass(frozen=True)
class PoseEstimate:
    x: float
    y: float
    cell: tuple[int, int]
    heading: Heading


def footprint(x: int, y: int, heading: Heading) -> list[tuple[int, int]]:
    """The 15 sensing-window cells for an agent at ``(x, y)``."""
    return [(x + dx, y + dy) for dx, dy in window_offsets(heading)]


def init_prior(start_pose: AgentPose, shape: tuple[int, int] = (16, 16),
               sigma: float = DEFAULT_PRIOR_SIGMA) -> np.ndarray:
    """Gaussian belief over the start sensing window, zero elsewhere, sum 1.

    ``sigma=np.inf`` gives the flat limit.
    """
    H, W = shape
    w = np.zeros(shape)
    for cx, cy in footprint(start_pose.x, start_pose.y, start_pose.heading):
        if 0 <= cx < W and 0 <= cy < H:
            d2 = (cx - start_pose.x) ** 2 + (cy - start_pose.y) ** 2
            w[cy, cx] = 1.0 if np.isinf(sigma) else np.exp(-0.5 * d2 / sigma ** 2)
    total = w.sum()
    if total <= 0:
        raise AddressingError(f"sensing footprint of {start_pose} lies outside the {H}x{W} memory")
    return w / total


def localize(w: np.ndarray) -> PoseEstimate:
    """Centre of mass as position; heading with the most mass in its window.

    Ties go to the first of North, East, South, West.
    """
    w = np.asarray(w, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise AddressingError("cannot localise on an all-zero access weight")
    H, W = w.shape
    ys, xs = np.mgrid[0:H, 0:W]
    cx = float((w * xs).sum() / total)
    cy = float((w * ys).sum() / total)
    cell = (int(np.clip(np.floor(cx + 0.5), 0, W - 1)), int(np.clip(np.floor(cy + 0.5), 0, H - 1)))
    best, best_mass = Heading.NORTH, -np.inf
    for h in Heading:
        mass = 0.0
        for fx, fy in footprint(cell[0], cell[1], h):
            if 0 <= fx < W and 0 <= fy < H:
                mass += w[fy, fx]
        if mass > best_mass:
            best, best_mass = h, mass
    return PoseEstimate(cx, cy, cell, best)


def _scatter(w: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    H, W = w.shape
    out = np.zeros_like(w)
    np.add.at(out, (np.clip(ty, 0, H - 1), np.clip(tx, 0, W - 1)), w)
    return out


def motion_predict(w: np.ndarray, action: int, pose: PoseEstimate | None = None) -> np.ndarray:
    """Move the belief by the last motion command.

    Go Straight translates the field one cell along the estimated heading,
    turns rotate every cell's offset from the estimated position cell by 90
    degrees. Mass pushed off the grid is clamped onto the nearest border
    cell and the result is renormalised.
    """
    w = np.asarray(w, dtype=np.float64)
    action = int(action)
    if action == Action.STAND_STILL:
        return w.copy()
    if pose is None:
        pose = localize(w)
    H, W = w.shape
    ys, xs = np.mgrid[0:H, 0:W]
    if action == Action.GO_STRAIGHT:
        dx, dy = FORWARD[pose.heading]
        out = _scatter(w, xs + dx, ys + dy)
    elif action in (Action.TURN_LEFT, Action.TURN_RIGHT):
        px, py = pose.cell
        ox, oy = xs - px, ys - py
        if action == Action.TURN_LEFT:
            nx, ny = oy, -ox
        else:
            nx, ny = -oy, ox
        out = _scatter(w, px + nx, py + ny)
    else:
        raise ValueError(f"unknown action {action!r}")
    return out / out.sum()


# --------------------------------------------------------------------------
# differentiable addressing
# --------------------------------------------------------------------------

def content_weight(memory: Tensor, key: Tensor, strength: Tensor, shape: tuple[int, int]) -> Tensor:
    """Softmax over slots of ``strength * cos(key, slot)``; memory is ``(H*W, C)``."""
    sim = ad.cosine_similarity(memory, key, eps=COSINE_EPS)
    return ad.reshape(ad.softmax(ad.mul(strength, sim)), shape)


def interpolate(w_content: Tensor, w_prior: Tensor, gate: Tensor) -> Tensor:
    return ad.add(ad.mul(gate, w_content), ad.mul(ad.sub(1.0, gate), w_prior))


def shift(w: Tensor, kernel: Tensor, circular: bool = True) -> Tensor:
    return ad.conv2d_3x3(w, kernel, circular=circular)


def sharpen(w: Tensor, zeta: Tensor) -> Tensor:
    """``w**zeta / (sum(w**zeta) + eps)`` evaluated on ``w / max(w)``.

    The ratio is invariant to rescaling ``w``, so dividing by a constant
    peak changes nothing but keeps the powers from underflowing below the
    ``eps`` guard (a flat 16x16 weight at zeta=4 would otherwise lose its
    unit sum). The peak is a constant on the tape; by the same invariance
    its gradient contribution is zero.
    """
    peak = float(np.max(w.data))
    scaled = ad.mul(w, 1.0 / peak) if peak > 0 else w
    powered = ad.power(scaled, zeta)
    return ad.div(powered, ad.add(ad.sum_(powered), SHARPEN_EPS))


def write(memory: Tensor, w: Tensor, erase: Tensor, add: Tensor) -> Tensor:
    """``M * (1 - w e^T) + w a^T`` on the flattened ``(H*W, C)`` memory."""
    wf = ad.reshape(w, (w.size,))
    kept = ad.mul(memory, ad.sub(1.0, ad.outer(wf, erase)))
    return ad.add(kept, ad.outer(wf, add))


def read(memory: Tensor, w: Tensor) -> Tensor:
    return ad.vecmat(ad.reshape(w, (w.size,)), memory)


def address(memory: Tensor, prev: Tensor, key: Tensor, strength: Tensor, gate: Tensor,
            kernel: Tensor, zeta: Tensor, circular: bool = True) -> dict[str, Tensor]:
    """Full measurement update; returns every intermediate stage by name."""
    shape = prev.shape
    wc = content_weight(memory, key, strength, shape)
    wg = interpolate(wc, prev, gate)
    wr = shift(wg, kernel, circular=circular)
    wf = sharpen(wr, zeta)
    return {"content": wc, "gated": wg, "shifted": wr, "weight": wf}


def readout_map(memory: np.ndarray) -> np.ndarray:
    """Occupancy probability per slot from the channel-mean log odds."""
    m = np.asarray(memory.data if isinstance(memory, Tensor) else memory, dtype=np.float64)
    # 1 - 1/(1 + e^m) is the logistic function of m; evaluate it in the
    # overflow-free form
    return ad._sigmoid(m.mean(axis=-1))
