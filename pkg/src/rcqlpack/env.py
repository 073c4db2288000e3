"""The strip-packing MDP.

State is split into a FIFO window of the most recent placements (``packed``,
capacity ``n_p``) and a window of candidate boxes (``slots``, capacity
``n_u``; 1 in online mode). A placed candidate is replaced in its slot by the
next pending box, or masked once the instance is exhausted. Boxes drop under
gravity onto the highest box whose open footprint overlaps theirs.

The environment reward is the decrease of the volume gap
``W*L*H_t - sum(placed volumes)``; it telescopes to
``-W*L*H_n + sum(volumes)`` over an episode.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from rcqlpack import kernels
from rcqlpack.errors import (
    ConfigError,
    EpisodeCompleteError,
    InvalidActionError,
    UndefinedMetricError,
    ValidationFailure,
)
from rcqlpack.geometry import BinSpec, BoxDims, Placement, as_box_array, rotation_table

MODES = ("offline", "online")


@dataclass(frozen=True, slots=True)
class PackAction:
    select: int = 0
    rotation: int = 0
    pos_x: int = 0
    pos_y: int = 0


@dataclass(frozen=True, slots=True)
class StepOutcome:
    reward: float
    new_height: float
    done: bool
    placement: Placement


@dataclass(frozen=True)
class Observation:
    """Normalised model inputs for one sub-action phase.

    ``packed`` rows are ``(w, l, h, x, y, z - H)`` scaled by ``2 / W`` with
    the footprint centred on the origin (oldest entry first). ``current`` is
    the selected box (rotate phase) or the rotated selected box (position
    phase).
    """

    phase: str
    packed: np.ndarray
    height: float
    unpacked: np.ndarray
    mask: np.ndarray
    current: np.ndarray | None = None


@dataclass
class EnvState:
    bin: BinSpec
    mode: str
    n_p: int
    n_u: int
    boxes: np.ndarray
    slots: np.ndarray
    next_box: int
    hx: np.ndarray
    hy: np.ndarray
    hz: np.ndarray
    hw: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    h_box: np.ndarray
    h_rot: np.ndarray
    n_placed: int = 0
    packed: deque = field(default_factory=deque)
    height: float = 0.0
    placed_volume: float = 0.0
    gap: float = 0.0
    seed: int | None = None

    @property
    def n_boxes(self) -> int:
        return self.boxes.shape[0]

    @property
    def done(self) -> bool:
        return self.n_placed == self.n_boxes

    @property
    def mask(self) -> np.ndarray:
        """True where a candidate slot holds a box."""
        return self.slots >= 0

    @property
    def pending(self) -> np.ndarray:
        return np.arange(self.next_box, self.n_boxes)

    def history(self) -> tuple[np.ndarray, ...]:
        return self.hx, self.hy, self.hz, self.hw, self.hl, self.hh, self.n_placed

    def placements(self) -> list[Placement]:
        return [
            Placement(BoxDims(self.hw[i], self.hl[i], self.hh[i]), self.hx[i], self.hy[i], self.hz[i])
            for i in range(self.n_placed)
        ]


def reset(instance, bin: BinSpec, mode: str = "offline", seed: int | None = None,
          n_p: int = 20, n_u: int = 20) -> EnvState:
    """Start an episode. Boxes are presented in instance order."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if n_p < 1 or n_u < 1:
        raise ConfigError("context sizes n_p and n_u must be positive")
    boxes = as_box_array(instance, bin)
    n = boxes.shape[0]
    k = 1 if mode == "online" else n_u
    slots = np.full(k, -1, dtype=np.int64)
    first = min(k, n)
    slots[:first] = np.arange(first)
    z = lambda: np.zeros(n, dtype=np.float64)  # noqa: E731
    return EnvState(
        bin=bin, mode=mode, n_p=n_p, n_u=k, boxes=boxes, slots=slots, next_box=first,
        hx=z(), hy=z(), hz=z(), hw=z(), hl=z(), hh=z(),
        h_box=np.full(n, -1, dtype=np.int64), h_rot=np.full(n, -1, dtype=np.int64),
        packed=deque(maxlen=n_p), seed=seed,
    )


def drop_height(state: EnvState, x: float, y: float, dims: BoxDims) -> float:
    return float(kernels.drop_height(*state.history(), float(x), float(y), float(dims.w), float(dims.l)))


def resolve_position(state: EnvState, box_index: int, rotation: int, pos_x: int, pos_y: int) -> Placement:
    """Rotate, map slots to coordinates, clamp and drop, without mutating state."""
    b = state.bin
    if not 0 <= rotation < len(rotation_table(b.dim)):
        raise InvalidActionError(f"rotation {rotation} invalid for dim={b.dim}")
    if not 0 <= pos_x < b.n_s:
        raise InvalidActionError(f"pos_x {pos_x} outside [0, {b.n_s})")
    if b.dim == 3 and not 0 <= pos_y < b.n_s:
        raise InvalidActionError(f"pos_y {pos_y} outside [0, {b.n_s})")
    perm = rotation_table(b.dim)[rotation]
    raw = state.boxes[box_index]
    w, l, h = float(raw[perm[0]]), float(raw[perm[1]]), float(raw[perm[2]])
    if w > b.W or l > b.L:
        raise InvalidActionError(f"rotation {rotation} makes box {box_index} exceed the bin footprint")
    x = min(pos_x * b.W / b.n_s, b.W - w)
    y = min(pos_y * b.L / b.n_s, b.L - l) if b.dim == 3 else 0.0
    z = float(kernels.drop_height(*state.history(), x, y, w, l))
    return Placement(BoxDims(w, l, h), x, y, z)


def step(state: EnvState, a: PackAction) -> StepOutcome:
    if state.done:
        raise EpisodeCompleteError("all boxes are already placed")
    sel = 0 if state.mode == "online" else int(a.select)
    if not 0 <= sel < state.n_u or state.slots[sel] < 0:
        raise InvalidActionError(f"selection {a.select} targets an empty candidate slot")
    box_index = int(state.slots[sel])
    p = resolve_position(state, box_index, int(a.rotation), int(a.pos_x), int(a.pos_y))

    i = state.n_placed
    state.hx[i], state.hy[i], state.hz[i] = p.x, p.y, p.z
    state.hw[i], state.hl[i], state.hh[i] = p.dims.w, p.dims.l, p.dims.h
    state.h_box[i] = box_index
    state.h_rot[i] = a.rotation
    state.n_placed = i + 1
    state.packed.append(i)

    if state.next_box < state.n_boxes:
        state.slots[sel] = state.next_box
        state.next_box += 1
    else:
        state.slots[sel] = -1

    old_gap = state.gap
    state.height = max(state.height, p.top)
    state.placed_volume += p.dims.volume
    state.gap = state.bin.area * state.height - state.placed_volume
    return StepOutcome(reward=old_gap - state.gap, new_height=state.height, done=state.done, placement=p)


def gap_ratio(state: EnvState) -> float:
    """Unfilled share of the bin volume up to the final height, in percent."""
    if state.n_placed == 0 or state.height <= 0:
        raise UndefinedMetricError("gap ratio is undefined before any box is placed")
    return (1.0 - state.placed_volume / (state.bin.area * state.height)) * 100.0


def check_invariants(state: EnvState, raise_on_error: bool = True) -> tuple[int, int, int]:
    """Count (overlapping pairs, unsupported boxes, out-of-bin boxes)."""
    b = state.bin
    tol = 1e-9 * max(b.W, b.L)
    counts = tuple(int(c) for c in kernels.count_violations(*state.history(), b.W, b.L, tol))
    if raise_on_error and any(counts):
        raise ValidationFailure(
            f"invalid layout: {counts[0]} overlapping pairs, {counts[1]} unsupported, {counts[2]} outside")
    return counts


def _scale(state: EnvState) -> float:
    return 2.0 / state.bin.W


def packed_features(state: EnvState) -> np.ndarray:
    idx = np.fromiter(state.packed, dtype=np.int64, count=len(state.packed))
    s = _scale(state)
    b = state.bin
    out = np.empty((idx.size, 6))
    out[:, 0] = state.hw[idx] * s
    out[:, 1] = state.hl[idx] * s
    out[:, 2] = state.hh[idx] * s
    out[:, 3] = state.hx[idx] * s - 1.0
    out[:, 4] = state.hy[idx] * s - b.L / b.W
    out[:, 5] = (state.hz[idx] - state.height) * s
    return out


def unpacked_features(state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    mask = state.slots >= 0
    out = np.zeros((state.n_u, 3))
    out[mask] = state.boxes[state.slots[mask]] * _scale(state)
    return out, mask


def observe(state: EnvState, phase: str = "select", select: int | None = None,
            rotation: int | None = None) -> Observation:
    unpacked, mask = unpacked_features(state)
    packed = packed_features(state)
    hfeat = state.height * _scale(state)
    if phase == "select":
        return Observation(phase, packed, hfeat, unpacked, mask)
    sel = 0 if state.mode == "online" else select
    if sel is None or not 0 <= sel < state.n_u or not mask[sel]:
        raise InvalidActionError(f"phase {phase!r} needs a valid selected slot, got {select}")
    current = unpacked[sel].copy()
    if phase == "rotate":
        return Observation(phase, packed, hfeat, unpacked, mask, current)
    if phase == "position":
        if rotation is None or not 0 <= rotation < len(rotation_table(state.bin.dim)):
            raise InvalidActionError(f"position phase needs a valid rotation, got {rotation}")
        current = current[list(rotation_table(state.bin.dim)[rotation])]
        return Observation(phase, packed, hfeat, unpacked, mask, current)
    raise ValueError(f"unknown phase {phase!r}")


def replay(instance, bin: BinSpec, actions, mode: str = "offline", n_p: int = 20, n_u: int = 20) -> EnvState:
    """Run an action sequence from a fresh episode and return the final state."""
    state = reset(instance, bin, mode, n_p=n_p, n_u=n_u)
    for a in actions:
        step(state, a)
    return state
