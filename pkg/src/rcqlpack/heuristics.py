"""Constructive bottom-left baselines.

All solvers plan on the environment's action grid (slot left edges, or flush
against the far wall) and score candidates with the environment's own drop
rule, so replaying the emitted actions reproduces the planned layout exactly.
"""
from __future__ import annotations

import numpy as np

from rcqlpack import kernels
from rcqlpack.env import EnvState, PackAction, reset, step
from rcqlpack.errors import ConfigError
from rcqlpack.geometry import BinSpec, rotation_table, slot_coords

_TIE = 1e-9


def grid_candidates(edges: np.ndarray, extent: float, size: float, n_s: int,
                    coords: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Snap desired left edges onto reachable coordinates for a box of ``size``.

    Returns ``(coordinate, slot index)`` pairs, sorted by coordinate and
    de-duplicated; the far-wall position (last slot, clamped) is always
    included.
    """
    if coords is None:
        coords = slot_coords(extent, n_s)
    idx = np.searchsorted(coords, edges, side="left")
    idx = np.minimum(np.append(idx, n_s - 1), n_s - 1)
    pos = np.minimum(coords[idx], extent - size)
    order = np.lexsort((idx, pos))
    pos, idx = pos[order], idx[order]
    keep = np.ones(pos.size, dtype=bool)
    keep[1:] = pos[1:] != pos[:-1]
    return pos[keep], idx[keep]


def _rotated(state: EnvState, box: int, r: int) -> tuple[float, float, float]:
    perm = rotation_table(state.bin.dim)[r]
    d = state.boxes[box]
    return float(d[perm[0]]), float(d[perm[1]]), float(d[perm[2]])


def _rotations_that_fit(state: EnvState, box: int):
    for r in range(len(rotation_table(state.bin.dim))):
        w, l, h = _rotated(state, box, r)
        if w <= state.bin.W and l <= state.bin.L:
            yield r, w, l, h


# ---------------------------------------------------------------------------
# MAXRECTS-BL (2D)
# ---------------------------------------------------------------------------


class FreeRectStore:
    """Maximal free rectangles of a 2D strip, stored as corners ``(x0, y0, x1, y1)``.

    The strip is open-topped, so rectangles touching the top have ``y1 = inf``.
    Corners (not sizes) are stored so splitting never accumulates rounding.
    """

    def __init__(self, width: float):
        self.corners = np.array([[0.0, 0.0, width, np.inf]])

    def __len__(self):
        return self.corners.shape[0]

    @property
    def rects(self) -> np.ndarray:
        """``(x, y, w, h)`` rows."""
        c = self.corners
        return np.column_stack([c[:, 0], c[:, 1], c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]])

    def place(self, x: float, y: float, w: float, h: float) -> None:
        X, Y = x + w, y + h
        c = self.corners
        x0, y0, x1, y1 = c.T
        hit = (x < x1) & (x0 < X) & (y < y1) & (y0 < Y)
        if not hit.any():
            return
        x0, y0, x1, y1 = c[hit].T
        pieces = [c[~hit]]
        pieces.append(np.column_stack([x0, y0, np.full_like(x0, x), y1])[x > x0])
        pieces.append(np.column_stack([np.full_like(x0, X), y0, x1, y1])[X < x1])
        pieces.append(np.column_stack([x0, y0, x1, np.full_like(y0, y)])[y > y0])
        pieces.append(np.column_stack([x0, np.full_like(y0, Y), x1, y1])[Y < y1])
        self.corners = self._prune(np.concatenate(pieces))

    @staticmethod
    def _prune(c: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = c.T
        inside = ((x0[None, :] <= x0[:, None]) & (y0[None, :] <= y0[:, None])
                  & (x1[:, None] <= x1[None, :]) & (y1[:, None] <= y1[None, :]))
        # inside[i, j]: rect i lies within rect j; identical pairs keep the first
        same = inside & inside.T
        n = c.shape[0]
        inside &= ~same | (np.arange(n)[None, :] < np.arange(n)[:, None])
        np.fill_diagonal(inside, False)
        return c[~inside.any(axis=1)]


OFFLINE_ORDERS = ("volume", "global")


def _candidate_slots(state: EnvState, order: str) -> np.ndarray:
    """Slots competing this step: the largest remaining box, or all of them."""
    slots = np.flatnonzero(state.mask)
    if order == "global" or slots.size <= 1:
        return slots
    vol = state.boxes[state.slots[slots]].prod(axis=1)
    return slots[[int(np.argmax(vol))]]


class MaxRectsBL:
    """Offline 2D bottom-left MAXRECTS.

    Boxes are taken in decreasing area (``order="volume"``); each is put on
    the (rotation, free rectangle) with the lowest top edge, ties to smaller
    x. ``order="global"`` instead lets every remaining box compete each step.
    """

    def __init__(self, instance, bin: BinSpec, order: str = "volume"):
        if bin.dim != 2:
            raise ConfigError("MAXRECTS-BL is a 2D heuristic")
        if order not in OFFLINE_ORDERS:
            raise ConfigError(f"order must be one of {OFFLINE_ORDERS}")
        self.order = order
        self.state = reset(instance, bin, "offline", n_u=len(instance))
        self.free = FreeRectStore(bin.W)
        self.coords = slot_coords(bin.W, bin.n_s)
        self.actions: list[PackAction] = []

    def _best_for(self, box: int):
        st = self.state
        best = None
        for r, w, _, h in _rotations_that_fit(st, box):
            f = self.free.corners
            ok = f[:, 2] - f[:, 0] >= w
            if not ok.any():
                continue
            fx, fx1 = f[ok, 0], f[ok, 2]
            idx = np.minimum(np.searchsorted(self.coords, fx, side="left"), st.bin.n_s - 1)
            xs = np.minimum(self.coords[idx], st.bin.W - w)
            fits = xs + w <= fx1
            if not fits.any():
                continue
            xs, idx = xs[fits], idx[fits]
            order = np.lexsort((idx, xs))
            xs, idx = xs[order], idx[order]
            drops = kernels.drop_map(*st.history(), xs, np.zeros(1), w, st.bin.L)[:, 0]
            tops = drops + h
            k = int(np.argmin(tops))  # first minimum is the leftmost
            cand = (tops[k], xs[k], box, r, int(idx[k]))
            if best is None or cand[:2] < best[:2]:
                best = cand
        return best

    def solve(self) -> list[PackAction]:
        st = self.state
        while not st.done:
            best = None
            for slot in _candidate_slots(st, self.order):
                cand = self._best_for(int(st.slots[slot]))
                if cand is not None and (best is None or cand[:2] < best[0][:2]):
                    best = (cand, int(slot))
            (_, _, _, r, ix), slot = best
            a = PackAction(select=slot, rotation=r, pos_x=ix, pos_y=0)
            out = step(st, a)
            p = out.placement
            self.free.place(p.x, p.z, p.dims.w, p.dims.h)
            self.actions.append(a)
        return self.actions


def maxrects_bl(instance, bin: BinSpec, order: str = "volume") -> list[PackAction]:
    return MaxRectsBL(instance, bin, order).solve()


# ---------------------------------------------------------------------------
# SKYLINE-BL (2D, online)
# ---------------------------------------------------------------------------


class SkylineProfile:
    """Upper envelope of a 2D layout as segments ``[x0, x1)`` at height ``h``."""

    def __init__(self, width: float):
        self.x0 = np.array([0.0])
        self.x1 = np.array([width])
        self.h = np.array([0.0])

    def drop(self, xs: np.ndarray, w: float) -> np.ndarray:
        over = (self.x0[None, :] < (xs + w)[:, None]) & (xs[:, None] < self.x1[None, :])
        return np.where(over, self.h[None, :], 0.0).max(axis=1)

    def add(self, x: float, w: float, top: float) -> None:
        x1 = x + w
        keep = (self.x1 <= x) | (self.x0 >= x1)
        cut = ~keep
        segs = [np.column_stack([self.x0[keep], self.x1[keep], self.h[keep]])]
        left = cut & (self.x0 < x)
        segs.append(np.column_stack([self.x0[left], np.full(left.sum(), x), self.h[left]]))
        right = cut & (self.x1 > x1)
        segs.append(np.column_stack([np.full(right.sum(), x1), self.x1[right], self.h[right]]))
        segs.append(np.array([[x, x1, top]]))
        s = np.concatenate(segs)
        s = s[np.argsort(s[:, 0], kind="stable")]
        merged = [s[0]]
        for row in s[1:]:
            if row[2] == merged[-1][2] and row[0] == merged[-1][1]:
                merged[-1] = np.array([merged[-1][0], row[1], row[2]])
            else:
                merged.append(row)
        m = np.array(merged)
        self.x0, self.x1, self.h = m[:, 0].copy(), m[:, 1].copy(), m[:, 2].copy()


class SkylineBL:
    """Online 2D skyline, bottom-left: lowest top edge, then leftmost."""

    def __init__(self, stream, bin: BinSpec):
        if bin.dim != 2:
            raise ConfigError("SKYLINE-BL is a 2D heuristic")
        self.state = reset(stream, bin, "online")
        self.profile = SkylineProfile(bin.W)
        self.coords = slot_coords(bin.W, bin.n_s)
        self.actions: list[PackAction] = []

    def solve(self) -> list[PackAction]:
        st = self.state
        while not st.done:
            box = int(st.slots[0])
            best = None
            for r, w, _, h in _rotations_that_fit(st, box):
                xs, idx = grid_candidates(self.profile.x0, st.bin.W, w, st.bin.n_s, self.coords)
                tops = self.profile.drop(xs, w) + h
                k = int(np.argmin(tops))
                cand = (tops[k], xs[k], r, int(idx[k]))
                if best is None or cand[:2] < best[:2]:
                    best = cand
            _, _, r, ix = best
            a = PackAction(0, r, ix, 0)
            p = step(st, a).placement
            self.profile.add(p.x, p.dims.w, p.top)
            self.actions.append(a)
        return self.actions


def skyline_bl(stream, bin: BinSpec) -> list[PackAction]:
    return SkylineBL(stream, bin).solve()


# ---------------------------------------------------------------------------
# 3D heightmap bottom-left
# ---------------------------------------------------------------------------


def unsupported_area(state: EnvState, x: float, y: float, w: float, l: float, z: float) -> float:
    """Base area of a box resting at height ``z`` that no top face supports."""
    if z == 0.0:
        return 0.0
    n = state.n_placed
    hx, hy, hw, hl = state.hx[:n], state.hy[:n], state.hw[:n], state.hl[:n]
    at = state.hz[:n] + state.hh[:n] == z
    ox = np.clip(np.minimum(x + w, hx + hw) - np.maximum(x, hx), 0.0, None)
    oy = np.clip(np.minimum(y + l, hy + hl) - np.maximum(y, hy), 0.0, None)
    # coplanar top faces cannot overlap, so the clipped areas add up exactly
    return w * l - float(np.sum((ox * oy)[at]))


class Heightmap3D:
    """Bottom-left over a 3D heightmap, offline or online.

    Candidate corners are the bin walls and the far edges of placed boxes,
    snapped onto the action grid. These are exactly the cells where the
    heightmap steps, so every local minimum in reach of a wall or a box edge
    is covered. Score order: lowest resulting top, least unsupported base
    area, smaller x, smaller y. Offline, boxes go in decreasing volume unless
    ``order="global"``.
    """

    def __init__(self, instance, bin: BinSpec, mode: str = "offline", order: str = "volume"):
        if bin.dim != 3:
            raise ConfigError("the heightmap heuristic is 3D; use MAXRECTS/SKYLINE for 2D")
        if order not in OFFLINE_ORDERS:
            raise ConfigError(f"order must be one of {OFFLINE_ORDERS}")
        self.order = order
        n_u = len(instance) if mode == "offline" else 1
        self.state = reset(instance, bin, mode, n_u=n_u)
        self.cx = slot_coords(bin.W, bin.n_s)
        self.cy = slot_coords(bin.L, bin.n_s)
        self.actions: list[PackAction] = []

    def _best_for(self, box: int, xedges, yedges):
        st = self.state
        b = st.bin
        best = None
        seen = set()
        for r, w, l, h in _rotations_that_fit(st, box):
            if (w, l, h) in seen:
                continue
            seen.add((w, l, h))
            xs, ix = grid_candidates(xedges, b.W, w, b.n_s, self.cx)
            ys, iy = grid_candidates(yedges, b.L, l, b.n_s, self.cy)
            tops = kernels.drop_map(*st.history(), xs, ys, w, l) + h
            t = tops.min()
            ii, jj = np.nonzero(tops <= t + _TIE)
            for i, j in zip(ii, jj):
                waste = unsupported_area(st, xs[i], ys[j], w, l, tops[i, j] - h)
                cand = (tops[i, j], waste, xs[i], ys[j], r, int(ix[i]), int(iy[j]))
                if best is None or _better(cand, best):
                    best = cand
        return best

    def solve(self) -> list[PackAction]:
        st = self.state
        while not st.done:
            n = st.n_placed
            xedges = np.concatenate([[0.0], st.hx[:n] + st.hw[:n]])
            yedges = np.concatenate([[0.0], st.hy[:n] + st.hl[:n]])
            best = None
            for slot in _candidate_slots(st, self.order):
                cand = self._best_for(int(st.slots[slot]), xedges, yedges)
                if cand is not None and (best is None or _better(cand, best[0])):
                    best = (cand, int(slot))
            (_, _, _, _, r, ix, iy), slot = best
            a = PackAction(slot, r, ix, iy)
            step(st, a)
            self.actions.append(a)
        return self.actions


def _better(a, b) -> bool:
    if a[0] < b[0] - _TIE:
        return True
    if a[0] > b[0] + _TIE:
        return False
    return a[1:4] < b[1:4]


def heuristic_3d(instance, bin: BinSpec, mode: str = "offline", order: str = "volume") -> list[PackAction]:
    return Heightmap3D(instance, bin, mode, order).solve()


def heuristic(instance, bin: BinSpec, mode: str = "offline") -> list[PackAction]:
    """The baseline for a (dim, mode) cell of the results table."""
    if bin.dim == 3:
        return heuristic_3d(instance, bin, mode)
    return maxrects_bl(instance, bin) if mode == "offline" else skyline_bl(instance, bin)


def heuristic_context(n_boxes: int, mode: str) -> dict:
    """Context sizes under which heuristic actions must be replayed."""
    return {"n_u": n_boxes if mode == "offline" else 1, "n_p": 20}
