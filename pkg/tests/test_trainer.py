import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from rcqlpack import checkpoint as ckpt
from rcqlpack.errors import ConfigError, NonFiniteLossError
from rcqlpack.model import ModelConfig
from rcqlpack.trainer import (
    Temperature,
    TrainConfig,
    Trainer,
    compute_losses,
    gae_advantages,
    load_actor,
    resume,
    temperature_loss,
    train,
    training_rewards,
)

MCFG = ModelConfig(n_enc_layers=2, n_dec_layers=1, d_h=16, d_ff=32, n_heads=2, recur_len=4,
                   n_p=4, n_u=4, n_s=16)


def tcfg(**kw):
    base = dict(batch_size=4, rollout_window=3, instance_size=6, train_steps=2, learning_rate=1e-3,
                eval_instances=2, checkpoint_every=0)
    return TrainConfig(**{**base, **kw})


def reference_gae(r, v, boot, g, lam):
    """Direct sum of discounted TD errors."""
    n = len(r)
    vv = list(v) + [boot]
    deltas = [r[t] + g * vv[t + 1] - vv[t] for t in range(n)]
    return [sum((g * lam) ** (k - t) * deltas[k] for k in range(t, n)) for t in range(n)]


def test_gae_hand_unrolled_example():
    adv, tgt = gae_advantages([1.0, 1.0], [0.5, 0.5], 0.0, 0.96, 0.95)
    assert adv.tolist() == pytest.approx([1.436, 0.5], abs=1e-12)
    assert tgt.tolist() == pytest.approx([1.936, 1.0], abs=1e-12)


def test_gae_single_step_is_td_error():
    adv, _ = gae_advantages([2.0], [0.3], 1.5, 0.9, 0.7)
    assert float(adv[0]) == pytest.approx(2.0 + 0.9 * 1.5 - 0.3)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_gae_unit_discount_zero_values_gives_reverse_cumsum(r):
    adv, _ = gae_advantages(r, [0.0] * len(r), 0.0, 1.0, 1.0)
    np.testing.assert_allclose(adv.numpy(), np.cumsum(r[::-1])[::-1], atol=1e-9)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=10),
       st.floats(-3, 3), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_discounted_td_sum(rv, boot, g, lam):
    r, v = [a for a, _ in rv], [b for _, b in rv]
    adv, _ = gae_advantages(r, v, boot, g, lam)
    np.testing.assert_allclose(adv.numpy(), reference_gae(r, v, boot, g, lam), atol=1e-9)


def test_gae_done_cuts_bootstrap():
    adv, _ = gae_advantages([[1.0], [1.0]], [[0.0], [0.0]], 100.0, 0.5, 1.0, dones=[[1.0], [0.0]])
    assert adv[0, 0] == pytest.approx(1.0)
    assert adv[1, 0] == pytest.approx(1.0 + 0.5 * 100.0)


def test_temperature_loss_example():
    loss = temperature_loss(torch.tensor(0.5, dtype=torch.float64), torch.tensor([-1.2]), 0.6)
    assert float(loss) == pytest.approx(0.3)


def test_temperature_gradient_raises_alpha_when_entropy_is_low():
    t = Temperature(0.1)
    # entropy 0.2 below target 0.6
    temperature_loss(t.alpha, torch.tensor([-0.2]), 0.6).backward()
    assert t.log_alpha.grad < 0


def test_loss_degenerate_cases():
    lp = torch.randn(5, requires_grad=True)
    v = torch.randn(5, requires_grad=True)
    ent = torch.rand(5)
    losses = compute_losses(lp, v, ent, torch.zeros(5), v.detach().clone(), torch.tensor(0.1), 0.6)
    assert losses.theta.item() == 0.0
    assert losses.phi.item() == 0.0


def test_advantages_are_constants_in_actor_loss():
    lp = torch.randn(4, requires_grad=True)
    adv = torch.randn(4, requires_grad=True)
    losses = compute_losses(lp, torch.zeros(4), torch.rand(4), adv, torch.zeros(4), torch.tensor(0.1), 0.6)
    losses.theta.backward()
    assert adv.grad is None
    assert torch.allclose(lp.grad, -adv.detach() / 4)


def test_non_finite_loss_raises():
    with pytest.raises(NonFiniteLossError):
        compute_losses(torch.tensor([float("nan")]), torch.zeros(1), torch.zeros(1), torch.ones(1),
                       torch.zeros(1), torch.tensor(0.1), 0.6)


def test_training_reward_adds_frozen_entropy_bonus():
    r = training_rewards(np.array([[2.0, -1.0]]), torch.tensor([[0.5, 1.5]]), 0.2, 0.1)
    np.testing.assert_allclose(r.numpy(), [[0.2 + 0.1, -0.1 + 0.3]])


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha_init=0.0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})
    d = TrainConfig()
    assert (d.learning_rate, d.batch_size, d.gamma, d.clip_norm, d.target_entropy) == (1e-4, 128, 0.96, 5.0, 0.6)


def params(tr):
    return [p.detach().clone() for p in tr.parameters()]


def test_step_clips_and_updates():
    tr = Trainer(MCFG, tcfg(clip_norm=5.0, learning_rate=1e-2))
    before = params(tr)
    m = tr.train_step()
    assert m["grad_norm_clipped"] <= 5.0 * (1 + 1e-6)
    assert any(not torch.equal(a, b) for a, b in zip(before, params(tr)))
    for k in ("loss_theta", "loss_phi", "loss_alpha", "entropy"):
        assert math.isfinite(m[k])
    assert len(tr.buffer) == 3  # one fresh window per update


def test_clip_engages_at_small_threshold():
    tr = Trainer(MCFG, tcfg(clip_norm=1e-3))
    m = tr.train_step()
    assert m["grad_norm"] > 1e-3
    assert m["grad_norm_clipped"] == pytest.approx(1e-3, rel=1e-4)


def test_zero_learning_rate_leaves_parameters_bit_identical():
    tr = Trainer(MCFG, tcfg(learning_rate=0.0, alpha_lr=0.0))
    before = params(tr)
    tr.train_step()
    assert all(torch.equal(a, b) for a, b in zip(before, params(tr)))


def test_alpha_stays_positive():
    tr = Trainer(MCFG, tcfg(learning_rate=1e-3, alpha_lr=5.0, alpha_init=1e-3))
    for _ in range(4):
        assert tr.train_step()["alpha"] > 0


def test_parameter_groups_are_named_and_disjoint():
    tr = Trainer(MCFG, tcfg())
    groups = {g["name"]: {id(p) for p in g["params"]} for g in tr.optimizer.param_groups}
    assert set(groups) == {"actor", "critic", "temperature"}
    assert not (groups["actor"] & groups["critic"])


def test_training_is_deterministic_under_seed():
    a, b = Trainer(MCFG, tcfg(seed=3)), Trainer(MCFG, tcfg(seed=3))
    ma, mb = a.train_step(), b.train_step()
    assert ma["loss_theta"] == mb["loss_theta"]
    assert all(torch.equal(x, y) for x, y in zip(params(a), params(b)))


def test_online_training_runs():
    m = Trainer(MCFG, tcfg(mode="online")).train_step()
    assert math.isfinite(m["loss_theta"])


def test_smoke_run_writes_checkpoint_and_resumes(tmp_path):
    cfg = tcfg(train_steps=3, checkpoint_every=2)
    tr = train(MCFG, cfg, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.rcql")) == ["ckpt_2.rcql", "ckpt_3.rcql"]
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3]
    assert "eval_gap_ratio" in lines[-1]
    h = tr.config_hash

    tr2 = resume(tmp_path, train_steps=5)
    assert tr2.step_count == 5 and tr2.config_hash == h
    assert ckpt.latest(tmp_path).name == "ckpt_5.rcql"
    actor, c = load_actor(ckpt.latest(tmp_path))
    assert c.step == 5 and not actor.training


def test_resume_refuses_when_no_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        resume(tmp_path)


def test_resume_restores_saved_weights_and_optimizer(tmp_path):
    first = train(MCFG, tcfg(train_steps=2), tmp_path)
    path = ckpt.latest(tmp_path)
    c = ckpt.load(path)
    again = Trainer(ckpt_model(c), TrainConfig.from_dict(c.train_config), tmp_path)
    again.load_state(c, ckpt.load_optim_state(path))
    for k in ("actor", "critic", "temperature"):
        a, b = getattr(first, k).state_dict(), getattr(again, k).state_dict()
        assert all(torch.equal(a[n], b[n]) for n in a)
    assert again.step_count == 2
    assert again.optimizer.state_dict()["state"].keys() == first.optimizer.state_dict()["state"].keys()


def ckpt_model(c):
    return ModelConfig.from_dict(c.model_config)
