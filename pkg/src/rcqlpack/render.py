"""Deterministic SVG drawings of solutions.

2D solutions are drawn as the x-z cross-section; 3D solutions as an isometric
view. Fill colours follow placement order (golden-angle hue steps), and every
number is printed with fixed precision so identical inputs give identical
bytes.
"""
from __future__ import annotations

import colorsys
import math
import os
from pathlib import Path

import numpy as np

from rcqlpack import kernels
from rcqlpack.data import Solution, read_solutions
from rcqlpack.errors import DataError, ValidationFailure

CANVAS = 600.0
MARGIN = 20.0


def colour(i: int) -> str:
    r, g, b = colorsys.hls_to_rgb((i * 137.508 % 360.0) / 360.0, 0.6, 0.55)
    return "#{:02x}{:02x}{:02x}".format(round(r * 255), round(g * 255), round(b * 255))


def shade(hex_colour: str, f: float) -> str:
    c = [int(hex_colour[k: k + 2], 16) for k in (1, 3, 5)]
    return "#" + "".join(f"{min(255, round(v * f)):02x}" for v in c)


def _f(v: float) -> str:
    return f"{v:.3f}"


def check_layout(sol: Solution) -> None:
    """Overlap, support and containment checks on the stored placements."""
    p = np.asarray(sol.placements, dtype=np.float64)
    if p.shape[0] != len(sol.instance.boxes):
        raise ValidationFailure(f"{p.shape[0]} placements for {len(sol.instance.boxes)} boxes")
    if not np.all(np.isfinite(p)):
        raise ValidationFailure("non-finite placement values")
    w, l, h, x, y, z = (np.ascontiguousarray(p[:, k]) for k in range(2, 8))
    b = sol.instance.bin
    counts = kernels.count_violations(x, y, z, w, l, h, p.shape[0], b.W, b.L, 1e-9 * max(b.W, b.L))
    if any(int(c) for c in counts):
        raise ValidationFailure(
            f"invalid layout: {int(counts[0])} overlapping pairs, {int(counts[1])} unsupported, "
            f"{int(counts[2])} outside")


def _svg(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
            f'viewBox="0 0 {_f(width)} {_f(height)}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="#ffffff"/>', *body, "</svg>", ""])


def svg_2d(sol: Solution) -> str:
    p = sol.placements
    b = sol.instance.bin
    top = max(float((p[:, 7] + p[:, 4]).max()), 1e-12)
    s = (CANVAS - 2 * MARGIN) / max(b.W, top)
    width, height = b.W * s + 2 * MARGIN, top * s + 2 * MARGIN
    body = [f'<rect x="{_f(MARGIN)}" y="{_f(MARGIN)}" width="{_f(b.W * s)}" height="{_f(top * s)}" '
            'fill="none" stroke="#000000" stroke-width="1"/>']
    for i, row in enumerate(p):
        w, h, x, z = row[2], row[4], row[5], row[7]
        body.append(f'<rect x="{_f(MARGIN + x * s)}" y="{_f(height - MARGIN - (z + h) * s)}" width="{_f(w * s)}" '
                    f'height="{_f(h * s)}" fill="{colour(i)}" stroke="#333333" stroke-width="0.5"/>')
    return _svg(width, height, body)


_C, _S = math.cos(math.pi / 6), math.sin(math.pi / 6)


def _iso(x, y, z):
    return (x - y) * _C, (x + y) * _S - z


def svg_3d(sol: Solution) -> str:
    p = sol.placements
    b = sol.instance.bin
    top = float((p[:, 7] + p[:, 4]).max())
    corners = [_iso(x, y, z) for x in (0, b.W) for y in (0, b.L) for z in (0, top)]
    u0, u1 = min(c[0] for c in corners), max(c[0] for c in corners)
    v0, v1 = min(c[1] for c in corners), max(c[1] for c in corners)
    s = (CANVAS - 2 * MARGIN) / max(u1 - u0, v1 - v0, 1e-12)
    width, height = (u1 - u0) * s + 2 * MARGIN, (v1 - v0) * s + 2 * MARGIN

    def pt(x, y, z):
        u, v = _iso(x, y, z)
        return f"{_f(MARGIN + (u - u0) * s)},{_f(MARGIN + (v - v0) * s)}"

    def poly(pts, fill):
        return f'<polygon points="{" ".join(pts)}" fill="{fill}" stroke="#333333" stroke-width="0.5"/>'

    body = [poly([pt(0, 0, 0), pt(b.W, 0, 0), pt(b.W, b.L, 0), pt(0, b.L, 0)], "#f2f2f2")]
    # painter's order: far (small x + y), low boxes first
    order = sorted(range(len(p)), key=lambda i: (p[i, 5] + p[i, 6] + p[i, 7], i))
    for i in order:
        w, l, h, x, y, z = p[i, 2:8]
        c = colour(i)
        X, Y, Z = x + w, y + l, z + h
        body.append(poly([pt(x, y, Z), pt(X, y, Z), pt(X, Y, Z), pt(x, Y, Z)], c))
        body.append(poly([pt(X, y, z), pt(X, Y, z), pt(X, Y, Z), pt(X, y, Z)], shade(c, 0.8)))
        body.append(poly([pt(x, Y, z), pt(X, Y, z), pt(X, Y, Z), pt(x, Y, Z)], shade(c, 0.65)))
    return _svg(width, height, body)


def render_solution(sol: Solution) -> str:
    check_layout(sol)
    return svg_2d(sol) if sol.instance.dim == 2 else svg_3d(sol)


def render_layout(solution_path, output_path, index: int = 0) -> Path:
    """Render record ``index`` of a solution file; nothing is written if validation fails."""
    sols = read_solutions(solution_path)
    if not 0 <= index < len(sols):
        raise DataError(f"solution index {index} out of range (file has {len(sols)})")
    text = render_solution(sols[index])
    out = Path(output_path)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, out)
    return out
