"""Versioned binary checkpoints.

Layout::

    magic    8 bytes  b"CISEGCK\\0"
    version  uint32 LE
    hlen     uint32 LE
    header   hlen bytes of UTF-8 JSON (sorted keys)
    payload  float32 LE blobs, one per named tensor, in header order

The header records every tensor's name, shape and byte offset plus a SHA-256
of the payload, so truncation and corruption are detected on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .model import SegModel
from .queue import QueryQueue

MAGIC = b"CISEGCK\0"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()


def encode(model: SegModel, step: int, config_hash: str = "", extra: dict | None = None) -> bytes:
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        raw = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    cfg = model.config
    header = {
        "config_hash": config_hash,
        "step": step,
        "model": dataclasses.asdict(cfg),
        "queue": model.queue.metadata(),
        "num_classes": model.num_classes,
        "tensors": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def save(path, model: SegModel, step: int, config_hash: str = "", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model, step, config_hash, extra))
    return path


def read_header(data: bytes) -> tuple[dict, bytes]:
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("file too short to be a checkpoint (truncated?)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[len(MAGIC) : len(MAGIC) + 8])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise CheckpointError("header truncated")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"header is not valid JSON: {exc}") from exc
    payload = data[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"payload is {len(payload)} bytes, header promises {header['payload_bytes']} "
            "(truncated or trailing garbage)"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload checksum mismatch: file is corrupted")
    return header, payload


def load(path, dtype: torch.dtype = torch.float32) -> tuple[SegModel, dict]:
    """Rebuild model and queue from a checkpoint; returns (model, header)."""
    data = Path(path).read_bytes()
    header, payload = read_header(data)
    mcfg = ModelConfig(**header["model"])
    qmeta = header["queue"]
    model = SegModel(mcfg, mode=qmeta["mode"])
    model.queue = QueryQueue.from_metadata(qmeta)
    model.class_head = nn.Linear(mcfg.d_q, header["num_classes"] + 1)
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"layout mismatch: missing {missing}, unexpected {unexpected}")
    model.to(dtype)
    return model, header
