import json
import struct

import pytest
import torch

from rcqlpack import checkpoint as ckpt
from rcqlpack.errors import DataError, ValidationFailure
from rcqlpack.model import ModelConfig, RCQLActor


def make(tmp_path, name="ckpt_7.rcql", step=7):
    cfg = ModelConfig(n_enc_layers=1, d_h=8, d_ff=16, n_heads=2, n_s=8, n_p=3, n_u=3, recur_len=2)
    actor = RCQLActor(cfg)
    t = ckpt.collect_tensors(actor=actor, extra=torch.nn.Linear(2, 2).double())
    path = ckpt.save(tmp_path / name, t, cfg.to_dict(), {"lr": 1e-3, "train_steps": 5}, step, {"note": "x"},
                     {"opt": 1})
    return path, t, cfg


def test_round_trip_is_exact(tmp_path):
    path, t, cfg = make(tmp_path)
    c = ckpt.load(path)
    assert list(c.tensors) == list(t)
    assert all(torch.equal(c.tensors[k], t[k]) and c.tensors[k].dtype == t[k].dtype for k in t)
    assert c.model_config == cfg.to_dict() and c.step == 7 and c.extra == {"note": "x"}
    actor = RCQLActor(ModelConfig.from_dict(c.model_config))
    actor.load_state_dict(c.section("actor"))  # strict: every parameter and BN statistic present
    assert ckpt.load_optim_state(path) == {"opt": 1}


def test_layout_and_manifest(tmp_path):
    path, t, _ = make(tmp_path)
    blob = path.read_bytes()
    assert blob[:8] == b"RCQLCKPT"
    version, hlen = struct.unpack("<IQ", blob[8:20])
    header = json.loads(blob[20:20 + hlen])
    assert version == ckpt.VERSION == header["format_version"]
    assert [r["name"] for r in header["tensors"]] == list(t)
    man = json.loads(path.with_name(path.name + ".manifest.json").read_text())
    assert man["tensors"][0]["shape"] == list(next(iter(t.values())).shape)
    assert not list(tmp_path.glob("*.tmp"))


def test_tampering_is_detected(tmp_path):
    path, _, _ = make(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValidationFailure):
        ckpt.load(path)
    ckpt.load(path, verify=False)


def test_bad_magic_version_and_missing_file(tmp_path):
    bad = tmp_path / "x.rcql"
    bad.write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ValidationFailure):
        ckpt.load(bad)
    bad.write_bytes(b"RCQLCKPT" + struct.pack("<IQ", 99, 2) + b"{}")
    with pytest.raises(ValidationFailure):
        ckpt.load(bad)
    with pytest.raises(DataError):
        ckpt.load(tmp_path / "missing.rcql")


def test_config_hash_ignores_step_budget_only():
    m = {"d_h": 16}
    a = ckpt.config_hash(m, {"lr": 1.0, "train_steps": 5})
    assert a == ckpt.config_hash(m, {"lr": 1.0, "train_steps": 500})
    assert a != ckpt.config_hash(m, {"lr": 2.0, "train_steps": 5})
    assert a != ckpt.config_hash({"d_h": 32}, {"lr": 1.0, "train_steps": 5})


def test_latest_orders_by_step_not_name(tmp_path):
    assert ckpt.latest(tmp_path) is None
    for s in (2, 10, 9):
        make(tmp_path, f"ckpt_{s}.rcql", s)
    assert ckpt.latest(tmp_path).name == "ckpt_10.rcql"
