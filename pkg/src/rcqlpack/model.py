"""Recurrent conditional-query attention actor and its critic.

Sequence layout seen by the encoder: ``[floor, p_0, ..., p_{n_p-1}]`` where the
floor token is a learned embedding of the current bin height (it keeps attention
well defined before anything is packed) and ``p_i`` are the packed FIFO entries,
oldest first, zero-padded on the right.

Layer 1 attends over the current window only. Every later layer also attends
over a FIFO of up to ``recur_len`` cached layer inputs of entries that have left
the window, so an L-layer encoder sees ``n_p + (L-1) * recur_len`` entries.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from rcqlpack.env import PackAction, packed_features, unpacked_features
from rcqlpack.errors import ConfigError, EpisodeCompleteError
from rcqlpack.geometry import rotation_table

PACKED_FEATURES = 6
BOX_FEATURES = 3
POSITION_HEADS = ("factored", "joint")


@dataclass
class ModelConfig:
    n_enc_layers: int = 3
    n_dec_layers: int = 1
    d_h: int = 128
    d_ff: int = 512
    n_heads: int = 8
    recur_len: int = 20
    n_p: int = 20
    n_u: int = 20
    n_s: int = 128
    dim: int = 3
    position_head: str = "factored"
    no_query: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_enc_layers", "n_dec_layers", "d_h", "d_ff", "n_heads", "recur_len", "n_p", "n_u", "n_s"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by n_heads={self.n_heads}")
        if self.dim not in (2, 3):
            raise ConfigError(f"dim must be 2 or 3, got {self.dim}")
        if self.position_head not in POSITION_HEADS:
            raise ConfigError(f"position_head must be one of {POSITION_HEADS}")

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        return cls(**{"n_enc_layers": 3, "n_dec_layers": 1, "d_h": 128, "d_ff": 512, **kw})

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        return cls(**{"n_enc_layers": 6, "n_dec_layers": 2, "d_h": 256, "d_ff": 1024, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_rotations(self) -> int:
        return 6 if self.dim == 3 else 2

    @property
    def receptive_field(self) -> int:
        return self.n_p + (self.n_enc_layers - 1) * self.recur_len


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass
class ObsBatch:
    packed: torch.Tensor  # (b, n_p, 6)
    packed_mask: torch.Tensor  # (b, n_p) bool
    height: torch.Tensor  # (b,)
    unpacked: torch.Tensor  # (b, n_u, 3)
    unpacked_mask: torch.Tensor  # (b, n_u) bool
    rot_mask: torch.Tensor  # (b, n_u, n_rot) bool, rotation keeps footprint inside the bin
    evict: torch.Tensor  # (b,) bool, the next placement pushes the oldest packed entry out
    online: bool = False

    @property
    def batch(self) -> int:
        return self.packed.shape[0]

    @classmethod
    def from_states(cls, states, cfg: ModelConfig, dtype=torch.float32) -> "ObsBatch":
        b = len(states)
        packed = np.zeros((b, cfg.n_p, PACKED_FEATURES))
        pmask = np.zeros((b, cfg.n_p), dtype=bool)
        height = np.zeros(b)
        unpacked = np.zeros((b, cfg.n_u, BOX_FEATURES))
        umask = np.zeros((b, cfg.n_u), dtype=bool)
        rmask = np.zeros((b, cfg.n_u, cfg.n_rotations), dtype=bool)
        evict = np.zeros(b, dtype=bool)
        perms = np.array(rotation_table(cfg.dim))
        modes = set()
        for i, st in enumerate(states):
            if st.n_p != cfg.n_p or st.n_u != cfg.n_u or st.bin.dim != cfg.dim:
                raise ConfigError(
                    f"env (n_p={st.n_p}, n_u={st.n_u}, dim={st.bin.dim}) does not match model "
                    f"(n_p={cfg.n_p}, n_u={cfg.n_u}, dim={cfg.dim})")
            modes.add(st.mode)
            pf = packed_features(st)
            packed[i, : len(pf)] = pf
            pmask[i, : len(pf)] = True
            height[i] = st.height * 2.0 / st.bin.W
            uf, um = unpacked_features(st)
            unpacked[i], umask[i] = uf, um
            rot = uf[:, perms]  # (n_u, n_rot, 3)
            rmask[i] = (rot[..., 0] <= 2.0 + 1e-9) & (rot[..., 1] <= 2.0 * st.bin.L / st.bin.W + 1e-9)
            evict[i] = len(st.packed) == st.n_p
        if len(modes) > 1:
            raise ConfigError("cannot batch offline and online lanes together")
        t = lambda a: torch.as_tensor(a, dtype=dtype)
        return cls(t(packed), torch.from_numpy(pmask), t(height), t(unpacked), torch.from_numpy(umask),
                   torch.from_numpy(rmask), torch.from_numpy(evict), modes == {"online"})


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class MaskedBatchNorm(nn.Module):
    """Batch normalisation over valid positions only; padded positions are output as zero."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        flat = x[mask] if mask is not None else x.reshape(-1, x.shape[-1])
        if self.training and flat.shape[0] > 1:
            mean = flat.mean(0)
            var = flat.var(0, unbiased=False)
            with torch.no_grad():
                n = flat.shape[0]
                self.running_mean.lerp_(mean.detach().to(self.running_mean.dtype), self.momentum)
                self.running_var.lerp_((var.detach() * n / (n - 1)).to(self.running_var.dtype), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean) * torch.rsqrt(var + self.eps) * self.weight + self.bias
        if mask is not None:
            y = torch.where(mask[..., None], y, torch.zeros((), dtype=y.dtype))
        return y


def _split(x: torch.Tensor, h: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, h, d // h).transpose(1, 2)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over heads; returns (merged output, weights)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    w = torch.softmax(scores, dim=-1)
    out = w @ v
    b, h, m, dk = out.shape
    return out.transpose(1, 2).reshape(b, m, h * dk), w


class FeedForward(nn.Sequential):
    def __init__(self, d: int, d_ff: int):
        super().__init__(nn.Linear(d, d_ff), nn.ReLU(), nn.Linear(d_ff, d))


class RecurrentAttentionLayer(nn.Module):
    """Queries from the current hidden states; keys/values from ``[memory, current]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_h
        self.n_heads = cfg.n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d)
        self.norm1 = MaskedBatchNorm(d, cfg.bn_momentum, cfg.bn_eps)
        self.ff = FeedForward(d, cfg.d_ff)
        self.norm2 = MaskedBatchNorm(d, cfg.bn_momentum, cfg.bn_eps)

    def attention(self, h, mask, memory=None, memory_mask=None):
        kv, kv_mask = h, mask
        if memory is not None:
            kv = torch.cat([memory, h], dim=1)
            kv_mask = torch.cat([memory_mask, mask], dim=1)
        q = _split(self.q(h), self.n_heads)
        out, w = attend(q, _split(self.k(kv), self.n_heads), _split(self.v(kv), self.n_heads), kv_mask)
        return self.o(out), w

    def forward(self, h, mask, memory=None, memory_mask=None):
        a, _ = self.attention(h, mask, memory, memory_mask)
        h = self.norm1(h + a, mask)
        return self.norm2(h + self.ff(h), mask)


@dataclass
class EncoderCache:
    """Per-layer FIFO of cached layer inputs; ``memory[0]`` is unused (layer 1 has no cache)."""

    memory: list[torch.Tensor]  # each (b, B, d_h), detached
    valid: torch.Tensor  # (b, B) bool, valid entries are right-aligned

    @classmethod
    def empty(cls, batch: int, cfg: ModelConfig, dtype=torch.float32) -> "EncoderCache":
        mem = [torch.zeros(batch, cfg.recur_len, cfg.d_h, dtype=dtype) for _ in range(cfg.n_enc_layers)]
        return cls(mem, torch.zeros(batch, cfg.recur_len, dtype=torch.bool))

    def __len__(self) -> int:
        return self.valid.shape[1]

    def lengths(self) -> torch.Tensor:
        return self.valid.sum(1)

    def advance(self, layer_inputs: list[torch.Tensor], evict: torch.Tensor) -> "EncoderCache":
        """Push the layer inputs of the entry leaving the window (index 0 of the packed part)."""
        e = evict[:, None]
        valid = torch.where(e, torch.cat([self.valid[:, 1:], e.new_ones(e.shape)], 1), self.valid)
        mem = []
        for m, h in zip(self.memory, layer_inputs):
            new = h[:, 1:2].detach().to(m.dtype)
            mem.append(torch.where(e[..., None], torch.cat([m[:, 1:], new], 1), m))
        return EncoderCache(mem, valid)

    def reset_lanes(self, lanes: torch.Tensor) -> "EncoderCache":
        keep = ~lanes
        return EncoderCache([m * keep[:, None, None].to(m.dtype) for m in self.memory], self.valid & keep[:, None])


class RecurrentEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(PACKED_FEATURES, cfg.d_h)
        self.floor = nn.Linear(1, cfg.d_h)
        self.layers = nn.ModuleList(RecurrentAttentionLayer(cfg) for _ in range(cfg.n_enc_layers))

    def embed_packed(self, packed: torch.Tensor) -> torch.Tensor:
        return self.embed(packed)

    def forward(self, packed, packed_mask, height, cache: EncoderCache | None = None):
        """Return (h_e, key mask, per-layer inputs)."""
        h = torch.cat([self.floor(height[:, None, None]), self.embed_packed(packed)], dim=1)
        mask = torch.cat([packed_mask.new_ones(packed_mask.shape[0], 1), packed_mask], dim=1)
        inputs = []
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            if i > 0 and cache is not None:
                h = layer(h, mask, cache.memory[i], cache.valid)
            else:
                h = layer(h, mask)
        return h, mask, inputs


class SharedKV(nn.Module):
    """Key/value projections of the encoder output, shared by all decoders of one layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.k = nn.Linear(cfg.d_h, cfg.d_h, bias=False)
        self.v = nn.Linear(cfg.d_h, cfg.d_h, bias=False)

    def forward(self, h_e):
        return _split(self.k(h_e), self.n_heads), _split(self.v(h_e), self.n_heads)


class QueryLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_h
        self.n_heads = cfg.n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d)
        self.norm1 = MaskedBatchNorm(d, cfg.bn_momentum, cfg.bn_eps)
        self.ff = FeedForward(d, cfg.d_ff)
        self.norm2 = MaskedBatchNorm(d, cfg.bn_momentum, cfg.bn_eps)

    def forward(self, x, x_mask, kv, key_mask):
        out, _ = attend(_split(self.q(x), self.n_heads), *kv, key_mask)
        x = self.norm1(x + self.o(out), x_mask)
        return self.norm2(x + self.ff(x), x_mask)


class ConditionalDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(QueryLayer(cfg) for _ in range(cfg.n_dec_layers))

    def forward(self, x, x_mask, kvs, key_mask):
        for layer, kv in zip(self.layers, kvs):
            x = layer(x, x_mask, kv, key_mask)
        return x


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------


def masked_log_softmax(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.log_softmax(logits, dim=-1)


def categorical_entropy(logp: torch.Tensor) -> torch.Tensor:
    p = logp.exp()
    safe = torch.where(torch.isfinite(logp), logp, torch.zeros((), dtype=logp.dtype))
    return -(p * safe).sum(-1)


def choose(logp: torch.Tensor, mode: str, generator: torch.Generator | None) -> torch.Tensor:
    if mode == "greedy":
        return logp.argmax(-1)
    if mode == "sample":
        return torch.multinomial(logp.detach().exp().float(), 1, generator=generator).squeeze(-1)
    raise ValueError(f"unknown mode {mode!r}")


def pick(logp: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return logp.gather(-1, idx[:, None]).squeeze(-1)


@dataclass
class PolicyStepOutput:
    select_dist: torch.Tensor | None  # (b, n_u) probabilities, None when online
    rotate_dist: torch.Tensor  # (b, n_rot)
    pos_dist: tuple[torch.Tensor, ...]  # factored: (x, y) or (x,) in 2D; joint: (n_s*n_s,)
    actions: list[PackAction]
    action_tensor: torch.Tensor  # (b, 4) select, rotation, pos_x, pos_y
    log_prob: torch.Tensor  # (b,)
    entropy: torch.Tensor  # (b,)
    sub_log_probs: dict[str, torch.Tensor] = field(default_factory=dict)
    layer_inputs: list[torch.Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# actor
# ---------------------------------------------------------------------------


class RCQLActor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_h
        self.encoder = RecurrentEncoder(cfg)
        self.kv = nn.ModuleList(SharedKV(cfg) for _ in range(cfg.n_dec_layers))
        self.emb_u = nn.Linear(BOX_FEATURES, d)
        self.dec_s = ConditionalDecoder(cfg)
        self.head_s = nn.Linear(d, 1)
        if not cfg.no_query:
            self.emb_c = nn.Linear(BOX_FEATURES, d)
            self.dec_r = ConditionalDecoder(cfg)
            self.emb_c2 = nn.Linear(BOX_FEATURES, d)
            self.dec_p = ConditionalDecoder(cfg)
        self.head_r = nn.Linear(d, cfg.n_rotations)
        if cfg.position_head == "joint" and cfg.dim == 3:
            self.head_xy = nn.Linear(d, cfg.n_s * cfg.n_s)
        else:
            self.head_x = nn.Linear(d, cfg.n_s)
            if cfg.dim == 3:
                self.head_y = nn.Linear(d, cfg.n_s)
                if not cfg.no_query:
                    self.emb_x = nn.Embedding(cfg.n_s, d)
        self.register_buffer("perms", torch.tensor(rotation_table(cfg.dim)), persistent=False)

    @property
    def joint(self) -> bool:
        return hasattr(self, "head_xy")

    def encode(self, obs: ObsBatch, cache: EncoderCache | None):
        return self.encoder(obs.packed, obs.packed_mask, obs.height, cache)

    def forward(self, obs: ObsBatch, cache: EncoderCache | None = None, mode: str = "sample",
                generator: torch.Generator | None = None, actions: torch.Tensor | None = None) -> PolicyStepOutput:
        return self.policy_step(obs, cache, mode, generator, actions)

    def policy_step(self, obs: ObsBatch, cache: EncoderCache | None = None, mode: str = "sample",
                    generator: torch.Generator | None = None,
                    actions: torch.Tensor | None = None) -> PolicyStepOutput:
        """Select, rotate, position; each sub-action conditions the next query.

        ``actions`` (b, 4) forces the sub-actions (used to score given trajectories).
        """
        cfg = self.cfg
        if not bool(obs.unpacked_mask.any(-1).all()):
            raise EpisodeCompleteError("a lane has no unpacked box left")
        b = obs.batch
        lanes = torch.arange(b)
        h_e, kmask, inputs = self.encode(obs, cache)
        kvs = [kv(h_e) for kv in self.kv]

        def forced(col):
            return None if actions is None else actions[:, col].long()

        g = self.dec_s(self.emb_u(obs.unpacked), obs.unpacked_mask, kvs, kmask)
        if obs.online:
            sel = torch.zeros(b, dtype=torch.long)
            lp_s = ent_s = torch.zeros(b, dtype=h_e.dtype)
            sel_dist = None
        else:
            logp_s = masked_log_softmax(self.head_s(g).squeeze(-1), obs.unpacked_mask)
            sel = forced(0) if actions is not None else choose(logp_s, mode, generator)
            lp_s, ent_s = pick(logp_s, sel), categorical_entropy(logp_s)
            sel_dist = logp_s.exp()
        s_c = obs.unpacked[lanes, sel]
        q_sel = g[lanes, sel][:, None]
        one = torch.ones(b, 1, dtype=torch.bool)

        # rotation
        if cfg.no_query:
            z_r = q_sel
        else:
            z_r = self.dec_r(self.emb_c(s_c)[:, None], one, kvs, kmask)
        logp_r = masked_log_softmax(self.head_r(z_r[:, 0]), obs.rot_mask[lanes, sel])
        rot = forced(1) if actions is not None else choose(logp_r, mode, generator)
        lp_r, ent_r = pick(logp_r, rot), categorical_entropy(logp_r)
        s_c2 = torch.gather(s_c, 1, self.perms[rot])

        # position
        if cfg.no_query:
            z_p = q_sel
        else:
            q_p = self.emb_c2(s_c2)[:, None]
            z_p = self.dec_p(q_p, one, kvs, kmask)
        zero = torch.zeros(b, dtype=torch.long)
        if self.joint:
            logp_xy = torch.log_softmax(self.head_xy(z_p[:, 0]), -1)
            if actions is not None:
                xy = forced(2) * cfg.n_s + forced(3)
            else:
                xy = choose(logp_xy, mode, generator)
            px, py = xy // cfg.n_s, xy % cfg.n_s
            lp_p, ent_p = pick(logp_xy, xy), categorical_entropy(logp_xy)
            pos_dist = (logp_xy.exp(),)
            subs = {"position": lp_p}
        else:
            logp_x = torch.log_softmax(self.head_x(z_p[:, 0]), -1)
            px = forced(2) if actions is not None else choose(logp_x, mode, generator)
            lp_x, ent_x = pick(logp_x, px), categorical_entropy(logp_x)
            pos_dist = (logp_x.exp(),)
            subs = {"pos_x": lp_x}
            lp_p, ent_p = lp_x, ent_x
            if cfg.dim == 3:
                if cfg.no_query:
                    z_y = z_p
                else:
                    z_y = self.dec_p(q_p + self.emb_x(px)[:, None], one, kvs, kmask)
                logp_y = torch.log_softmax(self.head_y(z_y[:, 0]), -1)
                py = forced(3) if actions is not None else choose(logp_y, mode, generator)
                lp_y, ent_y = pick(logp_y, py), categorical_entropy(logp_y)
                pos_dist = (pos_dist[0], logp_y.exp())
                subs["pos_y"] = lp_y
                lp_p, ent_p = lp_x + lp_y, ent_x + ent_y
            else:
                py = zero

        # strictly left to right so the total equals the sum of the logged sub-terms
        log_prob = lp_s + lp_r
        for v in subs.values():
            log_prob = log_prob + v
        entropy = ent_s + ent_r + ent_p
        at = torch.stack([sel, rot, px, py], dim=1)
        acts = [PackAction(int(a[0]), int(a[1]), int(a[2]), int(a[3])) for a in at.tolist()]
        sub = {"select": lp_s, "rotate": lp_r, **subs}
        return PolicyStepOutput(sel_dist, logp_r.exp(), pos_dist, acts, at, log_prob, entropy, sub, inputs)


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


@dataclass
class CriticOutput:
    value: torch.Tensor  # (b,)
    layer_inputs: list[torch.Tensor] = field(default_factory=list)


class RCQLCritic(nn.Module):
    """Own encoder and decoder over the unpacked boxes, mean-pooled into a scalar value."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = RecurrentEncoder(cfg)
        self.kv = nn.ModuleList(SharedKV(cfg) for _ in range(cfg.n_dec_layers))
        self.emb_u = nn.Linear(BOX_FEATURES, cfg.d_h)
        self.dec = ConditionalDecoder(cfg)
        self.head = nn.Linear(cfg.d_h, 1)

    def forward(self, obs: ObsBatch, cache: EncoderCache | None = None) -> CriticOutput:
        h_e, kmask, inputs = self.encoder(obs.packed, obs.packed_mask, obs.height, cache)
        kvs = [kv(h_e) for kv in self.kv]
        g = self.dec(self.emb_u(obs.unpacked), obs.unpacked_mask, kvs, kmask)
        m = obs.unpacked_mask[..., None].to(g.dtype)
        pooled = (g * m).sum(1) / m.sum(1).clamp_min(1.0)
        return CriticOutput(self.head(pooled).squeeze(-1), inputs)

    critic_value = forward
