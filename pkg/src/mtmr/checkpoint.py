"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    b"MTMRCKPT" | u32 version | u32 n_sections
    repeat: u16 name_len | name | u64 payload_len | payload

Tensor payloads are a u32 JSON-header length, a JSON header listing
``(name, dtype, shape)`` per tensor, then the raw C-order bytes back to back.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTMRCKPT"
VERSION = 1
SECTIONS = ("recon", "seg", "optimizer", "schedule", "itfs", "counters", "rng")


class CheckpointError(ValueError):
    pass


def pack_tensors(tensors: dict[str, torch.Tensor], meta: dict | None = None) -> bytes:
    header = {"meta": meta or {}, "tensors": []}
    chunks = []
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        header["tensors"].append([name, arr.dtype.str, list(arr.shape)])
        chunks.append(arr.tobytes(order="C"))
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + b"".join(chunks)


def unpack_tensors(payload: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    (n,) = struct.unpack_from("<I", payload)
    header = json.loads(payload[4:4 + n])
    pos = 4 + n
    out = {}
    for name, dtype, shape in header["tensors"]:
        dt = np.dtype(dtype)
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload[pos:pos + size], dtype=dt).reshape(shape)
        out[name] = torch.from_numpy(arr.copy())
        pos += size
    if pos != len(payload):
        raise CheckpointError("trailing bytes in tensor section")
    return out, header["meta"]


def write_container(path, sections: dict[str, bytes]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, payload in sections.items():
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<Q", len(payload)), payload]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_container(path) -> dict[str, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, sections = 16, {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + klen].decode()
        pos += 2 + klen
        (plen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        sections[name] = raw[pos:pos + plen]
        pos += plen
    missing = set(SECTIONS) - set(sections)
    if missing:
        raise CheckpointError(f"{path}: missing sections {sorted(missing)}")
    return sections


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


def _optimizer_payload(opt: torch.optim.Optimizer) -> bytes:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sorted(sd["state"].items()):
        for key, val in sorted(st.items()):
            tensors[f"{pid}.{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    return pack_tensors(tensors, {"param_groups": sd["param_groups"]})


def _load_optimizer(opt: torch.optim.Optimizer, payload: bytes) -> None:
    tensors, meta = unpack_tensors(payload)
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        pid, key = name.split(".", 1)
        state.setdefault(int(pid), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(state, path) -> None:
    """Serialise a :class:`~mtmr.trainer.TrainState` to ``path``."""
    from .trainer import history_to_json

    cfg = state.config
    sections = {
        "recon": pack_tensors(state.recon.state_dict(), {"config": asdict(cfg.recon)}),
        "seg": pack_tensors(state.seg.state_dict(), {"config": asdict(cfg.seg)}),
        "optimizer": _optimizer_payload(state.optimizer),
        "schedule": _json(asdict(cfg.schedule)),
        "itfs": _json(asdict(cfg.itfs)),
        "counters": _json({"epoch": state.epoch, "global_step": state.global_step}),
        "rng": _json({"seed": cfg.seed, "mask_seed": cfg.mask_seed}),
        "config": _json(cfg.to_dict()),
        "history": history_to_json(state.history).encode(),
    }
    write_container(path, sections)


def load_checkpoint(path, config=None):
    """Rebuild a TrainState; ``config`` (if given) replaces the stored training config."""
    from .recon_net import ReconConfig, ReconNet
    from .seg_net import SegConfig, SegNet
    from .trainer import TrainingConfig, TrainState, history_from_json, make_optimizer

    sec = read_container(path)
    recon_t, recon_meta = unpack_tensors(sec["recon"])
    seg_t, seg_meta = unpack_tensors(sec["seg"])
    if config is None:
        stored = json.loads(sec["config"]) if "config" in sec else {}
        stored["schedule"] = json.loads(sec["schedule"])
        stored["itfs"] = json.loads(sec["itfs"])
        stored["recon"] = recon_meta["config"]
        stored["seg"] = seg_meta["config"]
        config = TrainingConfig.from_dict(stored)
    recon_cfg = ReconConfig(**recon_meta["config"])
    seg_cfg = SegConfig(**seg_meta["config"])
    if recon_cfg != config.recon or seg_cfg != config.seg:
        raise CheckpointError("checkpoint network configs differ from the requested config")
    dtype = next(iter(recon_t.values())).dtype
    recon = ReconNet(recon_cfg).to(dtype)
    recon.load_state_dict(recon_t)
    seg = SegNet(seg_cfg).to(dtype)
    seg.load_state_dict(seg_t)
    opt = make_optimizer(recon, seg, config.lr)
    _load_optimizer(opt, sec["optimizer"])
    counters = json.loads(sec["counters"])
    history = history_from_json(sec["history"].decode()) if "history" in sec else []
    return TrainState(recon, seg, opt, config, counters["epoch"], counters["global_step"], history)
