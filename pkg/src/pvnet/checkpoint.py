"""Checkpoint files: a JSON header followed by PVT1 tensor payloads.

Layout::

    b"PVCK" | uint16 format version | uint32 header length | header JSON | payload

The header lists every tensor (parameters, then optimizer moments) with its
byte span in the payload, the model and run configuration, training state and
a SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

from pvnet import pvt
from pvnet.model import ModelConfig, PVNet

MAGIC = b"PVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: PVNet
    optimizer_state: dict
    optimizer_meta: dict
    epoch: int
    run_config: dict


def _encode(named: dict) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in named.items():
        blob = pvt.dumps(arr)
        entries.append({"name": name, "offset": offset, "length": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    return entries, b"".join(chunks)


def save_checkpoint(path: str | os.PathLike, model: PVNet, optimizer=None, epoch: int = 0,
                    run_config: dict | None = None) -> None:
    named = dict(model.params.state())
    opt_state = {} if optimizer is None else dict(sorted(optimizer.state.items()))
    param_entries, param_blob = _encode(named)
    opt_entries, opt_blob = _encode(opt_state)
    for e in opt_entries:
        e["offset"] += len(param_blob)
    payload = param_blob + opt_blob
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"kind": optimizer.kind, "lr": optimizer.lr, "momentum": optimizer.momentum,
                    "weight_decay": optimizer.weight_decay, "step_count": optimizer.step_count}
    header = {
        "format_version": VERSION,
        "model_config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "run_config": run_config or {},
        "epoch": int(epoch),
        "params": param_entries,
        "optimizer": opt_meta,
        "optimizer_state": opt_entries,
        "param_groups": {name: model.params.group(name) for name in named},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(head)) + head + payload)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(buf[start:start + hlen])
    payload = buf[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    header, payload = read_header(path)
    config = ModelConfig(**header["model_config"])
    model = PVNet(config, dtype=header["dtype"])
    state = {e["name"]: pvt.loads(payload[e["offset"]:e["offset"] + e["length"]]) for e in header["params"]}
    model.params.load_state(state)
    opt_state = {e["name"]: pvt.loads(payload[e["offset"]:e["offset"] + e["length"]])
                 for e in header["optimizer_state"]}
    return Checkpoint(model, opt_state, header["optimizer"] or {}, header["epoch"], header["run_config"])


def restore_optimizer(ckpt: Checkpoint):
    from pvnet.train import Optimizer

    meta = ckpt.optimizer_meta
    opt = Optimizer(ckpt.model.params, meta.get("kind", "sgd"), meta.get("lr", 0.01), meta.get("momentum", 0.9),
                    meta.get("weight_decay", 0.0))
    opt.step_count = meta.get("step_count", 0)
    opt.state = dict(ckpt.optimizer_state)
    return opt
