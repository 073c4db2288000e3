"""Versioned binary checkpoints.

Layout::

    b"RCQLCKPT"  | uint32 version | uint64 header length | JSON header | tensor bytes

The header holds the model config, the training config, the step, a config
hash and one ``{name, dtype, shape, offset, nbytes}`` record per tensor in
state-dict order (actor, critic, temperature; normalisation statistics
included). Tensor bytes are little-endian and contiguous. A manifest
``<file>.manifest.json`` lists shapes and the SHA-256 of the blob. Optimizer
and RNG state go to ``<file>.optim.pt``. Every file is written to a temporary
name and renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from rcqlpack.errors import DataError, ValidationFailure

MAGIC = b"RCQLCKPT"
VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64, "bool": torch.bool}


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def config_hash(model_cfg: dict, train_cfg: dict | None) -> str:
    train = {k: v for k, v in (train_cfg or {}).items() if k != "train_steps"}
    blob = json.dumps({"model": model_cfg, "train": train}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict | None
    step: int
    tensors: dict[str, torch.Tensor]
    config_hash: str
    extra: dict

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def collect_tensors(**modules) -> dict[str, torch.Tensor]:
    out = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            out[f"{prefix}.{k}"] = v
    return out


def save(path, tensors: dict[str, torch.Tensor], model_config: dict, train_config: dict | None = None,
         step: int = 0, extra: dict | None = None, optim_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dname = str(t.dtype).removeprefix("torch.")
        if dname not in _DTYPES:
            raise ValueError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        records.append({"name": name, "dtype": dname, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    chash = config_hash(model_config, train_config)
    header = json.dumps({
        "format_version": VERSION, "model_config": model_config, "train_config": train_config,
        "step": step, "config_hash": chash, "tensors": records, "extra": extra or {},
    }, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    if optim_state is not None:
        buf = io.BytesIO()
        torch.save(optim_state, buf)
        _atomic_write(path.with_name(path.name + ".optim.pt"), buf.getvalue())
    _atomic_write(path, blob)
    manifest = {
        "file": path.name, "format_version": VERSION, "sha256": hashlib.sha256(blob).hexdigest(),
        "step": step, "config_hash": chash,
        "tensors": [{"name": r["name"], "dtype": r["dtype"], "shape": r["shape"]} for r in records],
    }
    _atomic_write(path.with_name(path.name + ".manifest.json"), (json.dumps(manifest, indent=1) + "\n").encode())
    return path


def load(path, verify: bool = True) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:8] != MAGIC:
        raise ValidationFailure(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise ValidationFailure(f"{path}: unsupported checkpoint version {version}")
    man = path.with_name(path.name + ".manifest.json")
    if verify and man.exists():
        want = json.loads(man.read_text())["sha256"]
        if hashlib.sha256(blob).hexdigest() != want:
            raise ValidationFailure(f"{path}: content hash does not match manifest")
    header = json.loads(blob[20: 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for r in header["tensors"]:
        start = base + r["offset"]
        dt = _DTYPES[r["dtype"]]
        np_dt = torch.empty(0, dtype=dt).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(blob, dtype=np_dt, count=int(np.prod(r["shape"], dtype=np.int64)), offset=start)
        tensors[r["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(r["shape"])
    return Checkpoint(header["model_config"], header["train_config"], header["step"], tensors,
                      header["config_hash"], header.get("extra", {}))


def load_optim_state(path) -> dict | None:
    p = Path(path)
    side = p.with_name(p.name + ".optim.pt")
    if not side.exists():
        return None
    return torch.load(side, weights_only=False)


def latest(run_dir) -> Path | None:
    """Newest checkpoint in a run directory by step number."""
    cands = sorted(Path(run_dir).glob("ckpt_*.rcql"), key=lambda p: int(p.stem.split("_")[1]))
    return cands[-1] if cands else None
