import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rcqlpack.data import read_solutions, write_instances, generate_dataset
from rcqlpack.env import PackAction
from rcqlpack.errors import ConfigError, MissingCheckpointError
from rcqlpack.evaluation import (
    CSV_COLUMNS,
    EvalReport,
    RunConfig,
    bench,
    load_config_file,
    solve,
    validate_solution,
    write_csv,
)
from rcqlpack.geometry import BinSpec
from rcqlpack.model import ModelConfig
from rcqlpack.trainer import TrainConfig, train

FAST = {"ga_population": 6, "ga_generations": 3, "sa_iterations": 30}


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50))
def test_report_aggregates_are_ordered(g):
    r = EvalReport("m", "d", g, np.zeros(len(g)))
    r.check()
    assert r.worst >= r.average >= r.best and r.variance >= 0


def test_report_variance_uses_fractions():
    r = EvalReport("m", "d", [10.0, 30.0], [0.5, 1.5])
    assert r.variance == pytest.approx(0.01)
    assert r.time_ms == pytest.approx(1000.0)


@pytest.mark.parametrize("kw", [dict(method="ga", mode="online"), dict(method="sa", mode="online"),
                                dict(method="nope"), dict(dim=4), dict(method="rcql"),
                                dict(n_instances=0), dict(search={"bogus": 1})])
def test_inconsistent_run_configs_are_rejected(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"methd": "ga"})


def test_heuristic_on_hard_2d_reports_four_aggregates(tmp_path):
    cfg = RunConfig(method="heuristic", dim=2, n_instances=8, n_boxes=12, output=str(tmp_path / "s.jsonl"))
    reports, sols = solve(cfg)
    assert len(reports) == 1 and len(sols) == 8
    s = reports[0].summary()
    assert all(k in s for k in ("worst", "best", "average", "variance"))
    back = read_solutions(tmp_path / "s.jsonl")
    assert [b.gap_ratio for b in back] == pytest.approx([x.gap_ratio for x in sols])
    assert reports[0].runs == 8


@pytest.mark.parametrize("method, mode", [("ga", "offline"), ("sa", "offline"), ("random", "online"),
                                          ("heuristic", "online")])
def test_every_method_yields_validated_solutions(method, mode):
    cfg = RunConfig(method=method, mode=mode, dim=3, n_instances=2, n_boxes=6, n_s=16, search=FAST)
    reports, sols = solve(cfg)
    for s in sols:
        st_ = validate_solution(s.instance, mode, s.actions, s.n_p, s.n_u)
        assert st_.done


def test_validation_rejects_incomplete_solution():
    inst = generate_dataset(1, 3, "plain", BinSpec(10, 10, 8, 3), seed=0)[0]
    with pytest.raises(ConfigError):
        validate_solution(inst, "offline", [PackAction(0, 0, 0, 0)], 20, 20)


def test_mixed_box_counts_get_one_report_each(tmp_path):
    b = BinSpec(10, 10, 128, 2)
    path = tmp_path / "mix.jsonl"
    write_instances(path, generate_dataset(2, 5, "hard", b, seed=0) + generate_dataset(3, 9, "hard", b, seed=1))
    reports, _ = solve(RunConfig(method="heuristic", dim=2, dataset=str(path)))
    assert [r.gap_ratios.size for r in reports] == [2, 3]


def test_workers_do_not_change_results():
    cfg = RunConfig(method="sa", dim=2, n_instances=4, n_boxes=6, search=FAST)
    a = [s.gap_ratio for s in solve(cfg)[1]]
    b = [s.gap_ratio for s in solve(dataclasses.replace(cfg, workers=2))[1]]
    assert a == b


def test_rcql_requires_existing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpointError):
        solve(RunConfig(method="rcql", checkpoint=str(tmp_path / "none.rcql")))


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    mcfg = ModelConfig(n_enc_layers=1, d_h=16, d_ff=32, n_heads=2, n_s=16, n_p=4, n_u=4, recur_len=2)
    train(mcfg, TrainConfig(batch_size=2, rollout_window=2, instance_size=5, train_steps=1, eval_instances=1),
          run)
    return run / "ckpt_1.rcql"


@pytest.mark.parametrize("mode", ["offline", "online"])
def test_rcql_solve_uses_checkpoint(tiny_checkpoint, mode):
    cfg = RunConfig(method="rcql", mode=mode, checkpoint=str(tiny_checkpoint), n_s=16, n_instances=5,
                    n_boxes=7, batch_size=2)
    reports, sols = solve(cfg)
    assert reports[0].runs == 3 and len(sols) == 5
    assert sols[0].n_p == 4


def test_rcql_rejects_mismatched_grid(tiny_checkpoint):
    with pytest.raises(ConfigError):
        solve(RunConfig(method="rcql", checkpoint=str(tiny_checkpoint), n_s=32, n_instances=1, n_boxes=3))


def test_bench_is_a_cross_product_with_fixed_columns(tmp_path):
    b = BinSpec(10, 10, 128, 2)
    paths = []
    for k in range(2):
        p = tmp_path / f"d{k}.jsonl"
        write_instances(p, generate_dataset(2, 6, "hard", b, seed=k))
        paths.append(str(p))
    cfgs = [RunConfig(method=m, dim=2, dataset=p, search=FAST) for m in ("heuristic", "sa") for p in paths]
    rows = bench(cfgs)
    assert len(rows) == 4
    out = tmp_path / "t.csv"
    write_csv(out, rows)
    with open(out) as fh:
        reader = csv.reader(fh)
        assert tuple(next(reader)) == CSV_COLUMNS
        assert len(list(reader)) == 4
    with pytest.raises(ConfigError):
        bench([])


def test_config_files(tmp_path):
    (tmp_path / "a.yaml").write_text("method: sa\nsearch:\n  sa_iterations: 5\n")
    assert load_config_file(tmp_path / "a.yaml") == {"method": "sa", "search": {"sa_iterations": 5}}
    (tmp_path / "b.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "b.json")
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.json")
