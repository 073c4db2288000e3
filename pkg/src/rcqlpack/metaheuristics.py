"""Genetic algorithm and simulated annealing over (order, rotation) genomes.

A genome is decoded by placing boxes in genome order, each with its genome
rotation, at the grid position with the lowest drop height (ties: smaller x,
then smaller y). The environment replays the placements and supplies the gap
ratio, which both searches minimise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rcqlpack import kernels
from rcqlpack.env import PackAction, gap_ratio, reset, step
from rcqlpack.errors import ConfigError
from rcqlpack.geometry import BinSpec, as_box_array, rotation_table, slot_coords


@dataclass(frozen=True)
class Genome:
    order: np.ndarray
    rotations: np.ndarray

    def key(self) -> bytes:
        return self.order.tobytes() + b"|" + self.rotations.tobytes()

    def is_valid(self, n: int, n_rot: int) -> bool:
        return (self.order.shape == (n,) and np.array_equal(np.sort(self.order), np.arange(n))
                and self.rotations.shape == (n,) and bool(np.all((self.rotations >= 0) & (self.rotations < n_rot))))


@dataclass
class SearchConfig:
    ga_population: int = 120
    ga_generations: int = 200
    ga_tournament: int = 3
    ga_crossover_rate: float = 0.9
    ga_swap_rate: float = 0.1
    ga_rotation_rate: float = 0.1
    sa_iterations: int = 5000
    sa_initial_temperature: float | None = None  # None: calibrate
    sa_cooling_rate: float | None = None  # None: reach 1e-3 * T0 at the end
    sa_calibration_moves: int = 100
    sa_calibration_acceptance: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("ga_population", "ga_generations", "ga_tournament", "sa_iterations", "sa_calibration_moves"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("ga_crossover_rate", "ga_swap_rate", "ga_rotation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.sa_initial_temperature is not None and self.sa_initial_temperature < 0:
            raise ConfigError("sa_initial_temperature must be >= 0")
        if self.sa_cooling_rate is not None and not 0 < self.sa_cooling_rate <= 1:
            raise ConfigError("sa_cooling_rate must lie in (0, 1]")


@dataclass
class SearchResult:
    genome: Genome
    score: float
    actions: list[PackAction]
    trace: list[float] = field(default_factory=list)  # best-so-far per generation / iteration
    evaluations: int = 0
    initial_score: float = math.nan


class Decoder:
    """Lowest-drop constructive decoder with a memo of decoded genomes."""

    def __init__(self, instance, bin: BinSpec):
        self.bin = bin
        self.boxes = as_box_array(instance, bin)
        self.n = self.boxes.shape[0]
        self.rot = rotation_table(bin.dim)
        self.cx = slot_coords(bin.W, bin.n_s)
        self.cy = slot_coords(bin.L, bin.n_s) if bin.dim == 3 else np.zeros(1)
        self.calls = 0
        self._memo: dict[bytes, tuple[list[PackAction], float]] = {}

    def _fit(self, box: int, r: int) -> int:
        d = self.boxes[box]
        for cand in [r] + list(range(len(self.rot))):
            p = self.rot[cand]
            if d[p[0]] <= self.bin.W and d[p[1]] <= self.bin.L:
                return cand
        raise AssertionError("instance validation guarantees a fitting rotation")

    def _axis(self, coords, extent, size):
        pos = np.minimum(coords, extent - size)
        keep = np.ones(pos.size, dtype=bool)
        keep[1:] = pos[1:] != pos[:-1]
        return pos[keep], np.flatnonzero(keep)

    def decode(self, genome: Genome) -> tuple[list[PackAction], float]:
        self.calls += 1
        key = genome.key()
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        b = self.bin
        st = reset(self.boxes, b, "offline", n_u=self.n)
        actions = []
        for box in genome.order:
            box = int(box)
            r = self._fit(box, int(genome.rotations[box]))
            p = self.rot[r]
            d = self.boxes[box]
            w, l = float(d[p[0]]), float(d[p[1]])
            xs, ix = self._axis(self.cx, b.W, w)
            if b.dim == 3:
                ys, iy = self._axis(self.cy, b.L, l)
            else:
                ys, iy = self.cy, np.zeros(1, dtype=np.int64)
            zmap = kernels.drop_map(*st.history(), xs, ys, w, l)
            i, j = np.unravel_index(int(np.argmin(zmap)), zmap.shape)
            # with n_u == n nothing is refilled, so slot index == box index
            a = PackAction(select=box, rotation=r, pos_x=int(ix[i]), pos_y=int(iy[j]))
            step(st, a)
            actions.append(a)
        out = (actions, gap_ratio(st))
        self._memo[key] = out
        return out

    def score(self, genome: Genome) -> float:
        return self.decode(genome)[1]


def decode(genome: Genome, instance, bin: BinSpec) -> tuple[list[PackAction], float]:
    return Decoder(instance, bin).decode(genome)


def constructive_genome(boxes: np.ndarray, dim: int) -> Genome:
    """Decreasing volume, each box lying on its smallest side."""
    order = np.argsort(-boxes.prod(axis=1), kind="stable")
    rot = rotation_table(dim)
    rotations = np.array([min(range(len(rot)), key=lambda r: (b[rot[r][2]], r)) for b in boxes])
    return Genome(order.astype(np.int64), rotations.astype(np.int64))


def random_genome(n: int, n_rot: int, rng: np.random.Generator) -> Genome:
    return Genome(rng.permutation(n).astype(np.int64), rng.integers(0, n_rot, n).astype(np.int64))


def order_crossover(p1: np.ndarray, p2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """OX1: keep a slice of ``p1``; fill the rest in ``p2``'s order."""
    n = p1.size
    if n < 2:
        return p1.copy()
    a, b = sorted(rng.choice(n + 1, 2, replace=False))
    child = np.full(n, -1, dtype=p1.dtype)
    child[a:b] = p1[a:b]
    taken = np.zeros(n, dtype=bool)
    taken[p1[a:b]] = True
    fill = [g for g in np.roll(p2, -b) if not taken[g]]
    positions = [(b + k) % n for k in range(n - (b - a))]
    child[positions] = fill
    return child


# ---------------------------------------------------------------------------
# GA
# ---------------------------------------------------------------------------


def ga_solve(instance, bin: BinSpec, cfg: SearchConfig | None = None) -> SearchResult:
    cfg = cfg or SearchConfig()
    rng = np.random.default_rng(cfg.seed)
    dec = Decoder(instance, bin)
    n, n_rot = dec.n, len(dec.rot)

    pop = [constructive_genome(dec.boxes, bin.dim)]
    pop += [random_genome(n, n_rot, rng) for _ in range(cfg.ga_population - 1)]
    fit = np.array([dec.score(g) for g in pop])
    best_i = int(np.argmin(fit))
    best, best_fit = pop[best_i], float(fit[best_i])
    trace = [best_fit]

    def pick() -> Genome:
        k = min(cfg.ga_tournament, len(pop))
        idx = rng.choice(len(pop), k, replace=False)
        return pop[int(idx[np.argmin(fit[idx])])]

    for _ in range(cfg.ga_generations):
        children = []
        for _ in range(cfg.ga_population):
            a, b = pick(), pick()
            if rng.random() < cfg.ga_crossover_rate:
                order = order_crossover(a.order, b.order, rng)
                take = rng.random(n) < 0.5
                rots = np.where(take, a.rotations, b.rotations)
            else:
                order, rots = a.order.copy(), a.rotations.copy()
            if n >= 2 and rng.random() < cfg.ga_swap_rate:
                i, j = rng.choice(n, 2, replace=False)
                order[i], order[j] = order[j], order[i]
            mut = rng.random(n) < cfg.ga_rotation_rate
            if mut.any():
                rots = rots.copy()
                rots[mut] = rng.integers(0, n_rot, int(mut.sum()))
            children.append(Genome(order, rots))
        cfit = np.array([dec.score(g) for g in children])
        if cfit.min() > best_fit:
            worst = int(np.argmax(cfit))
            children[worst], cfit[worst] = best, best_fit
        pop, fit = children, cfit
        i = int(np.argmin(fit))
        if fit[i] < best_fit:
            best, best_fit = pop[i], float(fit[i])
        trace.append(best_fit)

    actions, score = dec.decode(best)
    return SearchResult(best, score, actions, trace, dec.calls - 1, trace[0])


# ---------------------------------------------------------------------------
# SA
# ---------------------------------------------------------------------------


def _neighbour(g: Genome, n_rot: int, rng: np.random.Generator) -> Genome:
    n = g.order.size
    order, rots = g.order.copy(), g.rotations.copy()
    if n >= 2 and (n_rot < 2 or rng.random() < 0.5):
        i, j = rng.choice(n, 2, replace=False)
        order[i], order[j] = order[j], order[i]
    else:
        k = int(rng.integers(n))
        choices = [r for r in range(n_rot) if r != rots[k]]
        rots[k] = choices[int(rng.integers(len(choices)))]
    return Genome(order, rots)


def accept_probability(delta: float, temperature: float) -> float:
    if delta <= 0:
        return 1.0
    if temperature <= 0:
        return 0.0
    return math.exp(-delta / temperature)


def calibrate_temperature(dec: Decoder, start: Genome, cfg: SearchConfig, rng) -> float:
    """Temperature at which the mean uphill move is accepted with the target probability."""
    base = dec.score(start)
    ups = []
    n_rot = len(dec.rot)
    for _ in range(cfg.sa_calibration_moves):
        d = dec.score(_neighbour(start, n_rot, rng)) - base
        if d > 0:
            ups.append(d)
    if not ups:
        return 1.0
    return -float(np.mean(ups)) / math.log(cfg.sa_calibration_acceptance)


def sa_solve(instance, bin: BinSpec, cfg: SearchConfig | None = None) -> SearchResult:
    cfg = cfg or SearchConfig()
    rng = np.random.default_rng(cfg.seed)
    dec = Decoder(instance, bin)
    n_rot = len(dec.rot)

    cur = constructive_genome(dec.boxes, bin.dim)
    cur_s = dec.score(cur)
    t = cfg.sa_initial_temperature
    if t is None:
        t = calibrate_temperature(dec, cur, cfg, rng)
    rate = cfg.sa_cooling_rate
    if rate is None:
        rate = 1e-3 ** (1.0 / cfg.sa_iterations)
    calls0 = dec.calls
    best, best_s = cur, cur_s
    trace = []
    for _ in range(cfg.sa_iterations):
        cand = _neighbour(cur, n_rot, rng)
        s = dec.score(cand)
        if rng.random() < accept_probability(s - cur_s, t):
            cur, cur_s = cand, s
            if s < best_s:
                best, best_s = cand, s
        trace.append(best_s)
        t *= rate
    evaluations = dec.calls - calls0
    actions, score = dec.decode(best)
    return SearchResult(best, score, actions, trace, evaluations, dec.score(constructive_genome(dec.boxes, bin.dim)))
