"""Solving datasets with any method, aggregate reports and benchmark tables."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from rcqlpack.data import DISTRIBUTIONS, Instance, Solution, generate_dataset, read_instances, write_solutions
from rcqlpack.env import EnvState, check_invariants, gap_ratio, replay
from rcqlpack.errors import ConfigError, MissingCheckpointError
from rcqlpack.geometry import BinSpec
from rcqlpack.heuristics import heuristic, heuristic_context
from rcqlpack.metaheuristics import SearchConfig, ga_solve, sa_solve

METHODS = ("heuristic", "ga", "sa", "rcql", "random")
LEARNING_METHODS = ("rcql",)
OFFLINE_ONLY = ("ga", "sa")
CSV_COLUMNS = ("method", "dataset", "dim", "mode", "n_boxes", "n_instances", "runs",
               "worst", "best", "average", "variance", "time_ms")


@dataclass
class EvalReport:
    method: str
    dataset: str
    gap_ratios: np.ndarray  # percent, one per instance (and run)
    wall_times: np.ndarray  # seconds per instance
    runs: int = 1

    def __post_init__(self):
        self.gap_ratios = np.asarray(self.gap_ratios, dtype=np.float64)
        self.wall_times = np.asarray(self.wall_times, dtype=np.float64)
        if self.gap_ratios.size == 0:
            raise ValueError("report needs at least one instance")

    @property
    def worst(self) -> float:
        return float(self.gap_ratios.max())

    @property
    def best(self) -> float:
        return float(self.gap_ratios.min())

    @property
    def average(self) -> float:
        return float(self.gap_ratios.mean())

    @property
    def variance(self) -> float:
        """Population variance of the gap ratios, taken as fractions rather than percent."""
        return float(np.var(self.gap_ratios / 100.0))

    @property
    def time_ms(self) -> float:
        return float(self.wall_times.mean() * 1000.0)

    def check(self) -> None:
        if not self.worst >= self.average >= self.best or self.variance < 0:
            raise AssertionError("report aggregates are inconsistent")

    def summary(self) -> dict:
        return {"method": self.method, "dataset": self.dataset, "n_instances": int(self.gap_ratios.size),
                "runs": self.runs, "worst": self.worst, "best": self.best, "average": self.average,
                "variance": self.variance, "time_ms": self.time_ms}


@dataclass
class RunConfig:
    method: str = "heuristic"
    mode: str = "offline"
    dim: int = 3
    dataset: str | None = None  # instance file; None: generate
    n_instances: int = 16
    n_boxes: int = 40
    distribution: str = "hard"
    bin_W: float = 10.0
    bin_L: float = 10.0
    n_s: int = 128
    seed: int = 0
    checkpoint: str | None = None
    n_p: int = 20
    n_u: int = 20
    batch_size: int = 128
    workers: int = 1
    output: str | None = None
    search: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim!r}")
        if self.method in OFFLINE_ONLY and self.mode == "online":
            raise ConfigError(f"{self.method} needs the whole instance and has no online variant")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"distribution must be one of {DISTRIBUTIONS}")
        for name in ("n_instances", "n_boxes", "n_s", "n_p", "n_u", "batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.method == "rcql" and not self.checkpoint:
            raise ConfigError("method rcql needs a checkpoint")
        self.search_config()

    def search_config(self) -> SearchConfig:
        known = {f.name for f in fields(SearchConfig)}
        bad = set(self.search) - known
        if bad:
            raise ConfigError(f"unknown search config keys: {sorted(bad)}")
        return SearchConfig(**{"seed": self.seed, **self.search})

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def bin(self) -> BinSpec:
        return BinSpec(self.bin_W, self.bin_L, self.n_s, self.dim)

    @property
    def dataset_id(self) -> str:
        if self.dataset:
            return Path(self.dataset).stem
        return f"{self.distribution}-{self.dim}d-n{self.n_boxes}-s{self.seed}"

    def instances(self) -> list[Instance]:
        if self.dataset:
            insts = read_instances(self.dataset, n_s=self.n_s)
            for i in insts:
                if i.dim != self.dim:
                    raise ConfigError(f"dataset is {i.dim}D but dim={self.dim}")
            return insts
        return generate_dataset(self.n_instances, self.n_boxes, self.distribution, self.bin, seed=self.seed)


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
    except Exception as e:  # noqa: BLE001 - parser errors vary by format
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return d


def validate_solution(inst: Instance, mode: str, actions, n_p: int, n_u: int) -> EnvState:
    """Replay through a fresh environment and run the full invariant suite."""
    st = replay(inst.boxes, inst.bin, actions, mode, n_p=n_p, n_u=n_u)
    if not st.done:
        raise ConfigError(f"solution places {st.n_placed} of {st.n_boxes} boxes")
    check_invariants(st)
    return st


def _placements(st: EnvState) -> np.ndarray:
    n = st.n_placed
    return np.column_stack([st.h_box[:n], st.h_rot[:n], st.hw[:n], st.hl[:n], st.hh[:n],
                            st.hx[:n], st.hy[:n], st.hz[:n]]).astype(np.float64)


def _classical(args):
    method, inst, mode, search, n_p, n_u = args
    t0 = time.perf_counter()
    n = len(inst.boxes)
    if method == "heuristic":
        actions = heuristic(inst.boxes, inst.bin, mode)
        ctx = heuristic_context(n, mode)
    elif method in OFFLINE_ONLY:
        fn = ga_solve if method == "ga" else sa_solve
        actions = fn(inst.boxes, inst.bin, search).actions
        ctx = {"n_u": n, "n_p": n_p}
    else:  # random
        from rcqlpack.rollout import random_action
        from rcqlpack.env import reset, step

        rng = np.random.default_rng(search.seed)
        st = reset(inst.boxes, inst.bin, mode, n_p=n_p, n_u=n_u)
        actions = []
        while not st.done:
            a = random_action(st, rng)
            step(st, a)
            actions.append(a)
        ctx = {"n_u": n_u, "n_p": n_p}
    return actions, ctx, time.perf_counter() - t0


def load_policy(cfg: RunConfig):
    from rcqlpack.model import ModelConfig, RCQLActor
    from rcqlpack.rollout import config_for_mode
    from rcqlpack import checkpoint as ckpt

    if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
        raise MissingCheckpointError(f"checkpoint not found: {cfg.checkpoint}")
    c = ckpt.load(cfg.checkpoint)
    mcfg = ModelConfig.from_dict(c.model_config)
    if mcfg.dim != cfg.dim or mcfg.n_s != cfg.n_s:
        raise ConfigError(f"checkpoint was trained for dim={mcfg.dim}, n_s={mcfg.n_s}")
    mcfg = config_for_mode(dataclasses.replace(mcfg, n_u=c.model_config["n_u"]), cfg.mode)
    actor = RCQLActor(mcfg)
    actor.load_state_dict(c.section("actor"))
    actor.eval()
    return actor


def solve(cfg: RunConfig, instances: list[Instance] | None = None) -> tuple[list[EvalReport], list[Solution]]:
    """Run the configured method over all instances; one report per box count."""
    insts = cfg.instances() if instances is None else instances
    results: list[tuple] = []
    runs = len(insts)  # classical solvers: one independent run per instance
    if cfg.method in LEARNING_METHODS:
        from rcqlpack.rollout import run_policy

        actor = load_policy(cfg)
        # one batched inference run per chunk (512 instances at batch 128 -> 4 runs)
        runs = math.ceil(len(insts) / cfg.batch_size)
        for lo in range(0, len(insts), cfg.batch_size):
            chunk = insts[lo: lo + cfg.batch_size]
            t0 = time.perf_counter()
            # run_policy needs one bin; instances of a file may differ in bin size
            by_bin: dict = {}
            for k, inst in enumerate(chunk):
                by_bin.setdefault(inst.bin, []).append(k)
            out = [None] * len(chunk)
            for b, ks in by_bin.items():
                res = run_policy(actor, [chunk[k].boxes for k in ks], b, cfg.mode, greedy=True,
                                 batch_size=cfg.batch_size)
                for k, r in zip(ks, res):
                    out[k] = r.actions
            dt = (time.perf_counter() - t0) / len(chunk)
            ctx = {"n_p": actor.cfg.n_p, "n_u": actor.cfg.n_u}
            results += [(a, ctx, dt) for a in out]
    else:
        search = cfg.search_config()
        jobs = [(cfg.method, inst, cfg.mode, search, cfg.n_p, cfg.n_u) for inst in insts]
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as ex:
                results = list(ex.map(_classical, jobs))
        else:
            results = [_classical(j) for j in jobs]

    solutions, groups = [], {}
    for inst, (actions, ctx, dt) in zip(insts, results):
        st = validate_solution(inst, cfg.mode, actions, ctx["n_p"], ctx["n_u"])
        g = gap_ratio(st)
        solutions.append(Solution(inst, cfg.mode, cfg.method, list(actions), _placements(st), g,
                                  ctx["n_p"], ctx["n_u"]))
        groups.setdefault(len(inst.boxes), []).append((g, dt))
    reports = []
    for n, vals in sorted(groups.items()):
        name = cfg.dataset_id if len(groups) == 1 else f"{cfg.dataset_id}@{n}"
        r = EvalReport(cfg.method, name, [v[0] for v in vals], [v[1] for v in vals], runs)
        r.check()
        reports.append(r)
    if cfg.output:
        write_solutions(cfg.output, solutions)
    return reports, solutions


def report_rows(cfg: RunConfig, reports: list[EvalReport], solutions: list[Solution]) -> list[dict]:
    counts = sorted({len(s.instance.boxes) for s in solutions})
    rows = []
    for n, r in zip(counts, reports):
        s = r.summary()
        rows.append({"method": cfg.method, "dataset": cfg.dataset_id, "dim": cfg.dim, "mode": cfg.mode,
                     "n_boxes": n, "n_instances": s["n_instances"], "runs": s["runs"], "worst": s["worst"],
                     "best": s["best"], "average": s["average"], "variance": s["variance"],
                     "time_ms": s["time_ms"]})
    return rows


def bench(configs: list[RunConfig]) -> list[dict]:
    """One CSV row per (method, dataset, box count)."""
    if not configs:
        raise ConfigError("bench needs at least one method and one dataset")
    rows = []
    for cfg in configs:
        reports, sols = solve(dataclasses.replace(cfg, output=None))
        rows += report_rows(cfg, reports, sols)
    return rows


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})
    tmp.replace(path)
