"""Running a policy (learned or uniform random) over whole episodes."""
from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch

from rcqlpack.env import EnvState, PackAction, gap_ratio, reset, step
from rcqlpack.geometry import BinSpec, rotation_table
from rcqlpack.model import EncoderCache, ModelConfig, ObsBatch, RCQLActor


def config_for_mode(cfg: ModelConfig, mode: str) -> ModelConfig:
    """Online episodes expose a single candidate box."""
    if mode == "online" and cfg.n_u != 1:
        return dataclasses.replace(cfg, n_u=1)
    return cfg


def new_state(boxes, bin: BinSpec, mode: str, cfg: ModelConfig) -> EnvState:
    return reset(boxes, bin, mode, n_p=cfg.n_p, n_u=cfg.n_u)


@dataclass
class EpisodeResult:
    actions: list[PackAction]
    gap_ratio: float
    state: EnvState
    max_context: int = 0  # largest number of keys the encoder attended to


def run_policy(actor: RCQLActor, instances, bin: BinSpec, mode: str = "offline", greedy: bool = True,
               batch_size: int = 64, generator: torch.Generator | None = None,
               dtype=torch.float32) -> list[EpisodeResult]:
    """Roll out full episodes; instances are batched by box count so lanes finish together."""
    cfg = actor.cfg
    if config_for_mode(cfg, mode) != cfg:
        raise ValueError("actor n_u does not match the episode mode; build it with config_for_mode")
    groups = defaultdict(list)
    for i, inst in enumerate(instances):
        groups[len(inst)].append(i)
    results: list[EpisodeResult | None] = [None] * len(instances)
    was_training = actor.training
    actor.eval()
    try:
        with torch.no_grad():
            for idx in groups.values():
                for lo in range(0, len(idx), batch_size):
                    chunk = idx[lo: lo + batch_size]
                    states = [new_state(instances[i], bin, mode, cfg) for i in chunk]
                    acts = [[] for _ in chunk]
                    cache = EncoderCache.empty(len(chunk), cfg, dtype)
                    widest = 0
                    while not states[0].done:
                        obs = ObsBatch.from_states(states, cfg, dtype)
                        out = actor.policy_step(obs, cache, "greedy" if greedy else "sample", generator)
                        widest = max(widest, 1 + cfg.n_p + int(cache.lengths().max()) * (cfg.n_enc_layers > 1))
                        for s, a, lst in zip(states, out.actions, acts):
                            step(s, a)
                            lst.append(a)
                        cache = cache.advance(out.layer_inputs, obs.evict)
                    for i, s, lst in zip(chunk, states, acts):
                        results[i] = EpisodeResult(lst, gap_ratio(s), s, widest)
    finally:
        actor.train(was_training)
    return results


def random_action(state: EnvState, rng: np.random.Generator) -> PackAction:
    """Uniform over valid slots, fitting rotations and position slots."""
    b = state.bin
    sel = 0 if state.mode == "online" else int(rng.choice(np.flatnonzero(state.slots >= 0)))
    box = state.boxes[state.slots[sel]]
    fits = [r for r, p in enumerate(rotation_table(b.dim)) if box[p[0]] <= b.W and box[p[1]] <= b.L]
    rot = int(rng.choice(fits))
    px = int(rng.integers(b.n_s))
    py = int(rng.integers(b.n_s)) if b.dim == 3 else 0
    return PackAction(sel, rot, px, py)


def random_policy_gaps(boxes, bin: BinSpec, mode: str = "offline", episodes: int = 512, seed: int = 0,
                       n_p: int = 20, n_u: int = 20) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty(episodes)
    for e in range(episodes):
        st = reset(boxes, bin, mode, n_p=n_p, n_u=n_u)
        while not st.done:
            step(st, random_action(st, rng))
        out[e] = gap_ratio(st)
    return out
