"""Random instance generation and the line-delimited JSON file formats.

Instance record (one per line)::

    {"bin": {"W": 10.0, "L": 10.0}, "boxes": [[w, l, h], ...]}

2D instances list ``[w, h]`` pairs. Floats carry 9 significant digits.
Solution records extend the instance record with ``dim``, ``mode``,
``method``, ``gap_ratio``, ``context`` (``n_p``, ``n_u`` of the replay
episode), ``actions`` (``[select, rotation, pos_x, pos_y]``)
and ``placements`` (``[box, rotation, w, l, h, x, y, z]``).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rcqlpack.env import PackAction
from rcqlpack.errors import ConfigError, DataError, InstanceFormatError
from rcqlpack.geometry import BinSpec, BoxDims, as_box_array

DISTRIBUTIONS = ("plain", "hard")
EPS_FRACTION = 1e-3


@dataclass(frozen=True)
class InstanceSpec:
    n_boxes: int
    distribution: str = "hard"
    bin: BinSpec = field(default_factory=lambda: BinSpec(10.0, 10.0))
    seed: int = 0

    def __post_init__(self):
        if self.n_boxes < 1:
            raise ConfigError("n_boxes must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"distribution must be one of {DISTRIBUTIONS}")


@dataclass
class Instance:
    bin: BinSpec
    boxes: np.ndarray

    @property
    def dim(self) -> int:
        return self.bin.dim

    def __eq__(self, other):
        return (isinstance(other, Instance) and self.bin == other.bin
                and np.array_equal(self.boxes, other.boxes))


def round_sig(v: float, digits: int = 9) -> float:
    return float(f"{v:.{digits}g}")


def side_bounds(distribution: str, side: float) -> tuple[float, float]:
    upper = side if distribution == "plain" else side / 4.0
    return EPS_FRACTION * side, upper


def generate_instance(spec: InstanceSpec) -> list[BoxDims]:
    """Boxes with sides uniform on ``(eps, L_b]`` (plain) or ``(eps, L_b/4]`` (hard)."""
    b = spec.bin
    lo, hi = side_bounds(spec.distribution, b.W)
    rng = np.random.default_rng(spec.seed)
    n_sides = 3 if b.dim == 3 else 2
    # 1 - U[0, 1) lies in (0, 1], which maps onto (lo, hi]
    u = 1.0 - rng.random((spec.n_boxes, n_sides))
    sides = lo + (hi - lo) * u
    out = []
    for row in sides:
        r = [round_sig(v) for v in row]
        out.append(BoxDims(r[0], r[1], r[2]) if b.dim == 3 else BoxDims(r[0], b.L, r[1]))
    return out


def generate_dataset(n_instances: int, n_boxes: int, distribution: str = "hard",
                     bin: BinSpec | None = None, seed: int = 0) -> list[Instance]:
    bin = bin or BinSpec(10.0, 10.0)
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n_instances)]
    return [
        Instance(bin, as_box_array(generate_instance(InstanceSpec(n_boxes, distribution, bin, s)), bin))
        for s in seeds
    ]


def _box_rows(inst: Instance) -> list[list[float]]:
    if inst.dim == 2:
        return [[round_sig(w), round_sig(h)] for w, _, h in inst.boxes]
    return [[round_sig(v) for v in row] for row in inst.boxes]


def instance_record(inst: Instance) -> dict:
    return {"bin": {"W": round_sig(inst.bin.W), "L": round_sig(inst.bin.L)}, "boxes": _box_rows(inst)}


def _atomic_write_lines(path, lines):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
    os.replace(tmp, path)


def write_instances(path, instances) -> None:
    _atomic_write_lines(path, (json.dumps(instance_record(i)) for i in instances))


def _parse_instance(rec, n_s: int, lineno: int, path) -> Instance:
    try:
        bin_rec = rec["bin"]
        boxes = rec["boxes"]
        W, L = float(bin_rec["W"]), float(bin_rec["L"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceFormatError(f"missing or invalid field: {exc}", lineno, path) from None
    if not isinstance(boxes, list) or not boxes:
        raise InstanceFormatError("'boxes' must be a non-empty list", lineno, path)
    arity = {len(b) if isinstance(b, list) else -1 for b in boxes}
    if arity not in ({2}, {3}):
        raise InstanceFormatError("boxes must all be [w, h] (2D) or [w, l, h] (3D)", lineno, path)
    dim = arity.pop()
    if int(rec.get("dim", dim)) != dim:
        raise InstanceFormatError("declared dim disagrees with box arity", lineno, path)
    try:
        bin = BinSpec(W, L, n_s=n_s, dim=dim)
        arr = as_box_array(boxes, bin)
    except (DataError, ConfigError, TypeError, ValueError) as exc:
        raise InstanceFormatError(str(exc), lineno, path) from None
    return Instance(bin, arr)


def _records(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    found = False
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        found = True
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InstanceFormatError(f"invalid JSON ({exc.msg})", lineno, path) from None
        if not isinstance(rec, dict):
            raise InstanceFormatError("record must be a JSON object", lineno, path)
        yield lineno, rec
    if not found:
        raise InstanceFormatError("file contains no records", 1, path)


def read_instances(path, n_s: int = 128) -> list[Instance]:
    return [_parse_instance(rec, n_s, lineno, path) for lineno, rec in _records(path)]


@dataclass
class Solution:
    instance: Instance
    mode: str
    method: str
    actions: list[PackAction]
    placements: np.ndarray  # (N, 8): box, rotation, w, l, h, x, y, z
    gap_ratio: float
    n_p: int = 20
    n_u: int = 20

    def to_record(self) -> dict:
        rec = instance_record(self.instance)
        rec.update(
            dim=self.instance.dim,
            mode=self.mode,
            method=self.method,
            gap_ratio=self.gap_ratio,
            context={"n_p": self.n_p, "n_u": self.n_u},
            actions=[[a.select, a.rotation, a.pos_x, a.pos_y] for a in self.actions],
            placements=[[int(p[0]), int(p[1])] + [float(v) for v in p[2:]] for p in self.placements],
        )
        return rec


def write_solutions(path, solutions) -> None:
    _atomic_write_lines(path, (json.dumps(s.to_record()) for s in solutions))


def read_solutions(path, n_s: int = 128) -> list[Solution]:
    out = []
    for lineno, rec in _records(path):
        inst = _parse_instance(rec, n_s, lineno, path)
        try:
            actions = [PackAction(*(int(v) for v in a)) for a in rec["actions"]]
            pl = np.asarray(rec["placements"], dtype=np.float64)
            if pl.ndim != 2 or pl.shape[1] != 8:
                raise ValueError("placements must be rows of 8 numbers")
            gap = float(rec.get("gap_ratio", math.nan))
            ctx = rec.get("context", {})
            sol = Solution(inst, str(rec.get("mode", "offline")), str(rec.get("method", "")),
                           actions, pl, gap, int(ctx.get("n_p", 20)), int(ctx.get("n_u", 20)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InstanceFormatError(f"invalid solution record: {exc}", lineno, path) from None
        out.append(sol)
    return out
