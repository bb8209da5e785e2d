"""Checkpoint files.

Layout: ``b"MDIFF1\\n"``, an 8-byte little-endian header length, a UTF-8 JSON
header ``{"kind", "config", "meta", "tensors": [{"name", "shape"}, ...]}``,
then every tensor's values as little-endian float64 in header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MDIFF1\n"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(kind: str, config: dict, state: dict[str, torch.Tensor],
                      meta: dict | None = None) -> bytes:
    names = list(state)
    header = {
        "kind": kind,
        "config": config,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(
        np.ascontiguousarray(state[n].detach().cpu().numpy(), dtype="<f8").tobytes() for n in names)
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + body


def save_checkpoint(path, kind: str, config: dict, state: dict[str, torch.Tensor],
                    meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(kind, config, state, meta))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[str, dict, dict[str, torch.Tensor], dict]:
    """Returns ``(kind, config, state, meta)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an MDIFF1 checkpoint")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float64))
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header["kind"], header["config"], state, header.get("meta", {})


def state_digest(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state_dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes())
    return h.hexdigest()
