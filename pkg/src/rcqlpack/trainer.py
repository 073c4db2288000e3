"""Entropy-regularised on-policy actor-critic training.

Each optimizer step collects ``rollout_window`` packing steps from
``batch_size`` env lanes with gradients attached, then updates actor, critic
and temperature once. Lanes carry their episodes (and encoder caches) across
windows; a finished lane restarts on a fresh instance.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from rcqlpack import checkpoint as ckpt
from rcqlpack.data import InstanceSpec, generate_dataset, generate_instance
from rcqlpack.env import gap_ratio, step
from rcqlpack.errors import ConfigError, NonFiniteLossError
from rcqlpack.geometry import BinSpec, as_box_array
from rcqlpack.model import EncoderCache, ModelConfig, ObsBatch, RCQLActor, RCQLCritic
from rcqlpack.rollout import config_for_mode, new_state, run_policy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    gamma: float = 0.96
    clip_norm: float = 5.0
    target_entropy: float = 0.6
    gae_lambda: float = 0.95
    rollout_window: int = 20
    train_steps: int = 10000
    instance_size: int = 200
    seed: int = 0
    mode: str = "offline"
    dim: int = 3
    distribution: str = "hard"
    bin_W: float = 10.0
    bin_L: float = 10.0
    alpha_init: float = 0.01
    alpha_lr: float | None = None  # None: learning_rate
    reward_scale: float | None = None  # None: 2 / (W * L * W), rewards in normalised height units
    fixed_instance_seed: int | None = None  # reuse one instance for every episode
    eval_every: int = 0  # 0: evaluate once at the end
    eval_instances: int = 16
    eval_seed: int = 10_007
    checkpoint_every: int = 1000
    normalize_advantages: bool = False  # standardise advantages over the window before the actor loss

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.alpha_init <= 0:
            raise ConfigError("alpha_init must be positive")
        for name in ("batch_size", "rollout_window", "instance_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.train_steps < 0 or self.checkpoint_every < 0 or self.eval_every < 0:
            raise ConfigError("train_steps, checkpoint_every and eval_every must be >= 0")
        if self.mode not in ("offline", "online"):
            raise ConfigError(f"mode must be offline or online, got {self.mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def bin(self) -> BinSpec:
        raise AttributeError("use bin_for(model_config)")

    def bin_for(self, mcfg: ModelConfig) -> BinSpec:
        return BinSpec(self.bin_W, self.bin_L, mcfg.n_s, self.dim)

    def scale(self) -> float:
        if self.reward_scale is not None:
            return self.reward_scale
        return 2.0 / (self.bin_W * self.bin_L * self.bin_W)


class Temperature(nn.Module):
    """alpha = exp(log_alpha), so alpha stays positive."""

    def __init__(self, alpha: float = 0.01):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha), dtype=torch.float64))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()


def gae_advantages(rewards, values, bootstrap, gamma: float, lam: float, dones=None):
    """GAE over a (T, ...) window. ``dones[t]`` cuts bootstrapping after step t.

    Returns (advantages, value targets = advantages + values).
    """
    rewards = torch.as_tensor(rewards, dtype=torch.float64)
    values = torch.as_tensor(values, dtype=torch.float64)
    nxt = torch.as_tensor(bootstrap, dtype=torch.float64).expand_as(rewards[0]).clone()
    dones = torch.zeros_like(rewards) if dones is None else torch.as_tensor(dones, dtype=torch.float64)
    adv = torch.zeros_like(rewards)
    run = torch.zeros_like(rewards[0])
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * live * nxt - values[t]
        run = delta + gamma * lam * live * run
        adv[t] = run
        nxt = values[t]
    return adv, adv + values


@dataclass
class RolloutBuffer:
    log_probs: list[torch.Tensor] = field(default_factory=list)  # each (b,)
    entropies: list[torch.Tensor] = field(default_factory=list)
    values: list[torch.Tensor] = field(default_factory=list)
    rewards: list[np.ndarray] = field(default_factory=list)  # env rewards, unscaled
    dones: list[np.ndarray] = field(default_factory=list)
    actions: list[torch.Tensor] = field(default_factory=list)
    observations: list[ObsBatch] = field(default_factory=list)
    alpha: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)

    def stacked(self):
        return (torch.stack(self.log_probs), torch.stack(self.entropies), torch.stack(self.values),
                torch.as_tensor(np.stack(self.rewards)), torch.as_tensor(np.stack(self.dones), dtype=torch.float64))

    def clear(self) -> None:
        for f in fields(self):
            if isinstance(getattr(self, f.name), list):
                getattr(self, f.name).clear()


@dataclass
class Losses:
    theta: torch.Tensor
    phi: torch.Tensor
    alpha: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.theta + self.phi + self.alpha


def temperature_loss(alpha: torch.Tensor, log_pi: torch.Tensor, target_entropy: float) -> torch.Tensor:
    """-alpha * (log pi + target); log pi is treated as a constant."""
    return -(alpha * (torch.as_tensor(log_pi, dtype=alpha.dtype).detach() + target_entropy)).mean()


def compute_losses(log_probs, values, entropies, advantages, targets, alpha: torch.Tensor,
                   target_entropy: float) -> Losses:
    """Actor, critic and temperature losses; advantages, targets and entropy are constants."""
    adv = advantages.detach().to(log_probs.dtype)
    l_theta = -(adv * log_probs).mean()
    l_phi = ((values - targets.detach().to(values.dtype)) ** 2).mean()
    # analytic entropy stands in for -log pi
    l_alpha = temperature_loss(alpha, -entropies.detach(), target_entropy)
    losses = Losses(l_theta, l_phi, l_alpha)
    for name in ("theta", "phi", "alpha"):
        v = getattr(losses, name)
        if not torch.isfinite(v):
            raise NonFiniteLossError(f"L_{name} is not finite ({float(v)})")
    return losses


def training_rewards(env_rewards, entropies, alpha: float, scale: float) -> torch.Tensor:
    """Per-step reward = scaled env reward + alpha * joint entropy (alpha frozen for the window)."""
    return torch.as_tensor(env_rewards, dtype=torch.float64) * scale + alpha * entropies.detach().double()


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, run_dir=None):
        self.tcfg = train_cfg
        model_cfg = config_for_mode(dataclasses.replace(model_cfg, dim=train_cfg.dim), train_cfg.mode)
        self.mcfg = model_cfg
        self.bin = train_cfg.bin_for(model_cfg)
        torch.manual_seed(train_cfg.seed)
        self.actor = RCQLActor(model_cfg)
        self.critic = RCQLCritic(model_cfg)
        self.temperature = Temperature(train_cfg.alpha_init)
        lr = train_cfg.learning_rate
        alr = lr if train_cfg.alpha_lr is None else train_cfg.alpha_lr
        self.optimizer = torch.optim.Adam([
            {"params": list(self.actor.parameters()), "lr": lr, "name": "actor"},
            {"params": list(self.critic.parameters()), "lr": lr, "name": "critic"},
            {"params": [self.temperature.log_alpha], "lr": alr, "name": "temperature"},
        ])
        self.rng = np.random.default_rng(train_cfg.seed)
        self.gen = torch.Generator().manual_seed(train_cfg.seed)
        self.step_count = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.buffer = RolloutBuffer()
        self._fixed = None
        if train_cfg.fixed_instance_seed is not None:
            self._fixed = as_box_array(generate_instance(InstanceSpec(
                train_cfg.instance_size, train_cfg.distribution, self.bin, train_cfg.fixed_instance_seed)), self.bin)
        self.states = [self._fresh_state() for _ in range(train_cfg.batch_size)]
        self.actor_cache = EncoderCache.empty(train_cfg.batch_size, model_cfg)
        self.critic_cache = EncoderCache.empty(train_cfg.batch_size, model_cfg)
        self.last_gaps: list[float] = []

    # -- plumbing ----------------------------------------------------------
    @property
    def config_hash(self) -> str:
        return ckpt.config_hash(self.mcfg.to_dict(), self.tcfg.to_dict())

    def _fresh_state(self):
        if self._fixed is not None:
            boxes = self._fixed
        else:
            seed = int(self.rng.integers(2**63))
            boxes = generate_instance(InstanceSpec(self.tcfg.instance_size, self.tcfg.distribution, self.bin, seed))
        return new_state(boxes, self.bin, self.tcfg.mode, self.mcfg)

    def parameters(self):
        yield from self.actor.parameters()
        yield from self.critic.parameters()
        yield self.temperature.log_alpha

    def eval_instances(self):
        if self._fixed is not None:
            return [self._fixed]
        ds = generate_dataset(self.tcfg.eval_instances, self.tcfg.instance_size, self.tcfg.distribution,
                              self.bin, seed=self.tcfg.eval_seed)
        return [d.boxes for d in ds]

    # -- one update --------------------------------------------------------
    def collect(self) -> RolloutBuffer:
        buf = self.buffer
        buf.clear()
        buf.alpha = float(self.temperature.alpha.detach())
        finished = []
        for _ in range(self.tcfg.rollout_window):
            obs = ObsBatch.from_states(self.states, self.mcfg)
            out = self.actor.policy_step(obs, self.actor_cache, "sample", self.gen)
            val = self.critic(obs, self.critic_cache)
            rewards = np.empty(len(self.states))
            dones = np.zeros(len(self.states), dtype=bool)
            for i, (s, a) in enumerate(zip(self.states, out.actions)):
                rewards[i] = step(s, a).reward
                if s.done:
                    dones[i] = True
                    finished.append(gap_ratio(s))
            self.actor_cache = self.actor_cache.advance(out.layer_inputs, obs.evict)
            self.critic_cache = self.critic_cache.advance(val.layer_inputs, obs.evict)
            if dones.any():
                for i in np.flatnonzero(dones):
                    self.states[i] = self._fresh_state()
                d = torch.from_numpy(dones)
                self.actor_cache = self.actor_cache.reset_lanes(d)
                self.critic_cache = self.critic_cache.reset_lanes(d)
            buf.log_probs.append(out.log_prob)
            buf.entropies.append(out.entropy)
            buf.values.append(val.value)
            buf.rewards.append(rewards)
            buf.dones.append(dones)
            buf.actions.append(out.action_tensor)
            buf.observations.append(obs)
        self.last_gaps = finished
        return buf

    def bootstrap_value(self) -> torch.Tensor:
        with torch.no_grad():
            obs = ObsBatch.from_states(self.states, self.mcfg)
            return self.critic(obs, self.critic_cache).value.double()

    def train_step(self) -> dict:
        t0 = time.perf_counter()
        self.actor.train()
        self.critic.train()
        buf = self.collect()
        log_probs, ents, values, env_r, dones = buf.stacked()
        rewards = training_rewards(env_r, ents, buf.alpha, self.tcfg.scale())
        adv, targets = gae_advantages(rewards, values.detach(), self.bootstrap_value(), self.tcfg.gamma,
                                      self.tcfg.gae_lambda, dones)
        if self.tcfg.normalize_advantages:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        losses = compute_losses(log_probs, values, ents, adv, targets, self.temperature.alpha, self.tcfg.target_entropy)
        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        params = [p for p in self.parameters() if p.grad is not None]
        pre = float(torch.nn.utils.clip_grad_norm_(params, self.tcfg.clip_norm))
        post = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad.double()) for p in params])))
        self.optimizer.step()
        self.step_count += 1
        return {
            "step": self.step_count,
            "loss_theta": losses.theta.item(), "loss_phi": losses.phi.item(), "loss_alpha": losses.alpha.item(),
            "alpha": self.temperature.alpha.item(), "entropy": ents.mean().item(),
            "gap_ratio": float(np.mean(self.last_gaps)) if self.last_gaps else None,
            "episodes": len(self.last_gaps), "grad_norm": pre, "grad_norm_clipped": post,
            "seconds": time.perf_counter() - t0,
        }

    # -- evaluation and persistence ---------------------------------------
    def evaluate(self) -> float:
        res = run_policy(self.actor, self.eval_instances(), self.bin, self.tcfg.mode, greedy=True)
        return float(np.mean([r.gap_ratio for r in res]))

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return ckpt.collect_tensors(actor=self.actor, critic=self.critic, temperature=self.temperature)

    def save(self, path=None) -> Path:
        if path is None:
            if self.run_dir is None:
                raise ConfigError("no run directory for checkpoints")
            path = self.run_dir / f"ckpt_{self.step_count}.rcql"
        optim = {"optimizer": self.optimizer.state_dict(), "rng": self.rng.bit_generator.state,
                 "torch_gen": self.gen.get_state()}
        return ckpt.save(path, self.state_tensors(), self.mcfg.to_dict(), self.tcfg.to_dict(), self.step_count,
                         {"config_hash": self.config_hash}, optim)

    def load_state(self, c: ckpt.Checkpoint, optim: dict | None) -> None:
        self.actor.load_state_dict(c.section("actor"))
        self.critic.load_state_dict(c.section("critic"))
        self.temperature.load_state_dict(c.section("temperature"))
        self.step_count = c.step
        if optim:
            self.optimizer.load_state_dict(optim["optimizer"])
            self.rng.bit_generator.state = optim["rng"]
            self.gen.set_state(optim["torch_gen"])


def _append_jsonl(path: Path, rec: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(rec) + "\n")


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, run_dir, trainer: Trainer | None = None,
          progress=None) -> Trainer:
    """Run (or continue) training, writing config, metrics and checkpoints to ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tr = trainer or Trainer(model_cfg, train_cfg, run_dir)
    tr.run_dir = run_dir
    snap = {"model": tr.mcfg.to_dict(), "train": tr.tcfg.to_dict(), "config_hash": tr.config_hash}
    (run_dir / "config.json").write_text(json.dumps(snap, indent=1) + "\n")
    metrics = run_dir / "metrics.jsonl"
    cfg = tr.tcfg
    while tr.step_count < cfg.train_steps:
        rec = tr.train_step()
        last = tr.step_count == cfg.train_steps
        if (cfg.eval_every and tr.step_count % cfg.eval_every == 0) or last:
            rec["eval_gap_ratio"] = tr.evaluate()
        _append_jsonl(metrics, rec)
        if progress is not None:
            progress(rec)
        if (cfg.checkpoint_every and tr.step_count % cfg.checkpoint_every == 0) or last:
            tr.save()
    if cfg.train_steps == 0 or ckpt.latest(run_dir) is None:
        tr.save()
    return tr


def resume(run_dir, train_steps: int | None = None, progress=None) -> Trainer:
    """Continue the run in ``run_dir`` from its newest checkpoint with the same configuration."""
    run_dir = Path(run_dir)
    path = ckpt.latest(run_dir)
    if path is None:
        raise ConfigError(f"no checkpoint in {run_dir}")
    c = ckpt.load(path)
    tdict = dict(c.train_config)
    if train_steps is not None:
        tdict["train_steps"] = train_steps
    tr = Trainer(ModelConfig.from_dict(c.model_config), TrainConfig.from_dict(tdict), run_dir)
    if tr.config_hash != c.config_hash:
        raise ConfigError("checkpoint config hash does not match the rebuilt configuration")
    tr.load_state(c, ckpt.load_optim_state(path))
    return train(tr.mcfg, tr.tcfg, run_dir, trainer=tr, progress=progress)


def load_actor(path) -> tuple[RCQLActor, ckpt.Checkpoint]:
    c = ckpt.load(path)
    actor = RCQLActor(ModelConfig.from_dict(c.model_config))
    actor.load_state_dict(c.section("actor"))
    actor.eval()
    return actor, c
