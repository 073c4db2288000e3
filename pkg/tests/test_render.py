import json

import numpy as np
import pytest

from rcqlpack.data import read_solutions, write_solutions
from rcqlpack.errors import DataError, InstanceFormatError, ValidationFailure
from rcqlpack.evaluation import RunConfig, solve
from rcqlpack.render import colour, render_layout, render_solution


def solution_file(tmp_path, dim, n_boxes=6):
    path = tmp_path / f"sol{dim}.jsonl"
    solve(RunConfig(method="heuristic", dim=dim, n_instances=2, n_boxes=n_boxes, output=str(path)))
    return path


def box_rects(svg):
    # background and bin outline are unfilled or white
    return [line for line in svg.splitlines()
            if line.startswith("<rect") and 'fill="none"' not in line and 'fill="#ffffff"' not in line]


@pytest.mark.parametrize("dim", [2, 3])
def test_render_is_byte_identical(tmp_path, dim):
    path = solution_file(tmp_path, dim)
    a = render_layout(path, tmp_path / "a.svg").read_bytes()
    b = render_layout(path, tmp_path / "b.svg").read_bytes()
    assert a == b and a.startswith(b"<svg")


def test_single_box_2d_is_one_rectangle_at_origin(tmp_path):
    path = solution_file(tmp_path, 2, n_boxes=1)
    sol = read_solutions(path)[0]
    assert tuple(sol.placements[0, 5:]) == (0.0, 0.0, 0.0)
    svg = render_solution(sol)
    boxes = box_rects(svg)
    assert len(boxes) == 1 and f'fill="{colour(0)}"' in boxes[0]
    assert 'x="20.000"' in boxes[0]  # flush with the left wall


def test_single_box_3d_is_one_cuboid(tmp_path):
    sol = read_solutions(solution_file(tmp_path, 3, n_boxes=1))[0]
    svg = render_solution(sol)
    faces = [line for line in svg.splitlines() if line.startswith("<polygon") and "#f2f2f2" not in line]
    assert len(faces) == 3  # top and two visible sides


def test_colours_follow_placement_order():
    assert len({colour(i) for i in range(50)}) == 50
    assert colour(3) == colour(3)


def test_overlapping_solution_fails_without_writing(tmp_path):
    path = solution_file(tmp_path, 3)
    sol = read_solutions(path)[0]
    sol.placements = np.array(sol.placements)
    sol.placements[1, 5:8] = sol.placements[0, 5:8]
    bad = tmp_path / "bad.jsonl"
    write_solutions(bad, [sol])
    out = tmp_path / "bad.svg"
    with pytest.raises(ValidationFailure):
        render_layout(bad, out)
    assert not out.exists()


def test_malformed_file_and_index(tmp_path):
    bad = tmp_path / "m.jsonl"
    bad.write_text(json.dumps({"bin": [10, 10], "boxes": [[1, 1, 1]], "actions": "x"}) + "\n")
    with pytest.raises(InstanceFormatError):
        render_layout(bad, tmp_path / "x.svg")
    with pytest.raises(DataError):
        render_layout(solution_file(tmp_path, 2), tmp_path / "x.svg", index=9)
