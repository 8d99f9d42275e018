"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then raw little-endian tensor payloads.  Each manifest entry
records (group, name, dtype, shape, offset, nbytes) with offsets relative
to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import ModelConfig, Parameters
from .trainer import OptimState

MAGIC = b"UNMTCKPT"
VERSION = 1
_NP_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Parameters, opt: Optional[OptimState] = None, vocab_hash: str = "",
                    extra: Optional[dict] = None) -> None:
    entries = []
    chunks = []
    offset = 0

    def add(group, name, tensor):
        nonlocal offset
        dtype = str(tensor.dtype).replace("torch.", "")
        data = tensor.detach().cpu().numpy().astype(_NP_DTYPES[dtype], copy=False).tobytes()
        entries.append({"group": group, "name": name, "dtype": dtype, "shape": list(tensor.shape),
                        "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    for name, t in params.tensors.items():
        add("param", name, t)
    if opt is not None:
        for name, t in opt.m.items():
            add("adam_m", name, t)
        for name, t in opt.v.items():
            add("adam_v", name, t)
    manifest = {
        "version": VERSION,
        "config": params.config.to_dict(),
        "frozen": sorted(params.frozen),
        "vocab_hash": vocab_hash,
        "step": opt.step if opt is not None else 0,
        "optimizer": opt.hyper() if opt is not None else None,
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_manifest(path) -> tuple:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest, blob[16 + n:]


def load_checkpoint(path, expected_vocab_hash: Optional[str] = None):
    """Return ``(params, opt, manifest)``; ``opt`` is None when no optimizer state was saved."""
    manifest, payload = read_manifest(path)
    if expected_vocab_hash is not None and manifest["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(f"{path}: vocabulary drift (checkpoint {manifest['vocab_hash']}, "
                              f"expected {expected_vocab_hash})")
    groups = {"param": OrderedDict(), "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor payload at {e['name']!r}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"])
        groups[e["group"]][e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    config = ModelConfig.from_dict(manifest["config"])
    params = Parameters(groups["param"], config, manifest["frozen"])
    opt = None
    if manifest.get("optimizer"):
        opt = OptimState(**manifest["optimizer"])
        opt.m, opt.v = groups["adam_m"], groups["adam_v"]
    return params, opt, manifest
