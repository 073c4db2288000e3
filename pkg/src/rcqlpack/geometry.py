"""Box geometry for 2D and 3D strip packing.

2D instances reuse the 3D code path: a 2D box ``(w, h)`` becomes
``BoxDims(w, bin.L, h)`` and only the width/height swap is a legal rotation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from rcqlpack.errors import ConfigError, InstanceError

# rotated dims are (d[p[0]], d[p[1]], d[p[2]]) for permutation p
ROTATIONS_3D: tuple[tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))
ROTATIONS_2D: tuple[tuple[int, int, int], ...] = ((0, 1, 2), (2, 1, 0))


@dataclass(frozen=True, slots=True)
class BoxDims:
    w: float
    l: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise InstanceError(f"box sides must be strictly positive, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w, self.l, self.h)

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h


@dataclass(frozen=True, slots=True)
class BinSpec:
    W: float
    L: float
    n_s: int = 128
    dim: int = 3

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        if not (self.W > 0 and self.L > 0):
            raise ConfigError("bin extents must be positive")
        if int(self.n_s) != self.n_s or self.n_s < 2:
            raise ConfigError(f"n_s must be an integer >= 2, got {self.n_s}")

    @property
    def area(self) -> float:
        return self.W * self.L


@dataclass(frozen=True, slots=True)
class Placement:
    dims: BoxDims
    x: float
    y: float
    z: float

    @property
    def top(self) -> float:
        return self.z + self.dims.h


def enumerate_rotations(dim: int) -> list[int]:
    """Rotation indices in table order: 6 axis permutations in 3D, 2 in 2D."""
    return list(range(len(rotation_table(dim))))


def rotation_table(dim: int) -> tuple[tuple[int, int, int], ...]:
    if dim == 3:
        return ROTATIONS_3D
    if dim == 2:
        return ROTATIONS_2D
    raise ConfigError(f"dim must be 2 or 3, got {dim}")


def rotate(d: BoxDims, r: int, dim: int = 3) -> BoxDims:
    perm = rotation_table(dim)[r]
    s = d.as_tuple()
    return BoxDims(s[perm[0]], s[perm[1]], s[perm[2]])


def rotate_array(dims: np.ndarray, r: int, dim: int = 3) -> np.ndarray:
    """Vectorised :func:`rotate` over the last axis of ``dims``."""
    return dims[..., list(rotation_table(dim)[r])]


def slot_to_coord(index: int, extent: float, n_s: int) -> float:
    if not 0 <= index < n_s:
        raise ValueError(f"slot index {index} outside [0, {n_s})")
    return index * extent / n_s


def slot_coords(extent: float, n_s: int) -> np.ndarray:
    """Left edges of all slots, identical to ``slot_to_coord`` element-wise."""
    return np.arange(n_s) * extent / n_s


def clamp_into_bin(p: Placement, bin: BinSpec) -> Placement:
    if p.dims.w > bin.W or p.dims.l > bin.L:
        raise InstanceError(f"box {p.dims.as_tuple()} exceeds the bin footprint")
    return replace(p, x=min(p.x, bin.W - p.dims.w), y=min(p.y, bin.L - p.dims.l))


def footprints_overlap(a: Placement, b: Placement) -> bool:
    return (a.x < b.x + b.dims.w and b.x < a.x + a.dims.w
            and a.y < b.y + b.dims.l and b.y < a.y + a.dims.l)


def fits_some_rotation(d: BoxDims, bin: BinSpec) -> bool:
    for r in enumerate_rotations(bin.dim):
        q = rotate(d, r, bin.dim)
        if q.w <= bin.W and q.l <= bin.L:
            return True
    return False


def as_box_array(boxes, bin: BinSpec) -> np.ndarray:
    """Normalise an instance to an ``(N, 3)`` array of ``(w, l, h)``.

    Accepts ``BoxDims`` objects or rows of length 3, or rows of length 2
    ``(w, h)`` for 2D bins (depth filled with ``bin.L``).
    """
    rows = []
    for b in boxes:
        if isinstance(b, BoxDims):
            rows.append(b.as_tuple())
            continue
        t = tuple(float(v) for v in b)
        if len(t) == 2:
            if bin.dim != 2:
                raise InstanceError("2-element box given for a 3D bin")
            rows.append((t[0], bin.L, t[1]))
        elif len(t) == 3:
            rows.append(t)
        else:
            raise InstanceError(f"box must have 2 or 3 sides, got {len(t)}")
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InstanceError("box sides must be finite and strictly positive")
    if bin.dim == 2 and np.any(arr[:, 1] != bin.L):
        raise InstanceError("2D boxes must span the full bin depth")
    for row in arr:
        if not fits_some_rotation(BoxDims(*row), bin):
            raise InstanceError(f"box {tuple(row)} fits the bin under no rotation")
    return arr
