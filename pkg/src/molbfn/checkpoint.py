"""Versioned little-endian checkpoint container.

Layout::

    bytes 0-7    magic  b"MOLBFNCK"
    bytes 8-11   format version, uint32 LE
    bytes 12-19  header length N, uint64 LE
    next N bytes UTF-8 JSON header
    remainder    tensor data, concatenated

The header holds ``config``, ``schedule``, ``vocab_sha256``, ``meta`` and a
``tensors`` list of ``{name, dtype, shape, offset, nbytes}`` with offsets
relative to the start of the data section.  Tensor bytes are always
little-endian (dtype strings ``<f4``, ``<f8``, ``<i8``, ``|b1``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MOLBFNCK"
FORMAT_VERSION = 1

_TO_NP = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}
_FROM_NP = {v: k for k, v in _TO_NP.items()}


class CheckpointError(ValueError):
    pass


def save(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.dtype not in _TO_NP:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _TO_NP[t.dtype]
        raw = np.ascontiguousarray(t.numpy().astype(code, copy=False)).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack("<Q", data[12:20])
    try:
        header = json.loads(data[20 : 20 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    base = 20 + n
    tensors = {}
    for e in header.pop("tensors"):
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {e['name']}")
        arr = np.frombuffer(data[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header, tensors


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], list[dict]]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(val)
    return tensors, sd["param_groups"]


def restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], param_groups: list[dict]) -> None:
    state: dict[int, dict] = {}
    for name, val in tensors.items():
        if not name.startswith("optim."):
            continue
        _, idx, key = name.split(".", 2)
        state.setdefault(int(idx), {})[key] = val
    opt.load_state_dict({"state": state, "param_groups": param_groups})
