"""Flat binary checkpoint of named arrays with a JSON header.

Byte layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"NVTCKPT1"
    offset 8   8 bytes   uint64 header length H
    offset 16  H bytes   UTF-8 JSON header
    ...        0-7 bytes zero padding so the data section starts 8-aligned
    data       concatenated array payloads, row-major, little-endian

The header is ``{"meta": {...}, "arrays": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` with ``dtype`` a numpy type string such as
``"<f4"`` and ``offset`` counted from the start of the data section. Arrays
are written in sorted-name order and the JSON uses sorted keys, so equal
contents always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"NVTCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        # ascontiguousarray would promote 0-d arrays to 1-d
        a = np.array(a, dtype=a.dtype.newbyteorder("<"), order="C", copy=True)
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode()
    pad = -(16 + len(header)) % 8
    return MAGIC + struct.pack("<Q", len(header)) + header + b"\0" * pad + b"".join(blobs)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    start = 16 + hlen + (-(16 + hlen) % 8)
    arrays = {}
    for e in header["arrays"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise CheckpointError(f"array {e['name']!r} runs past end of file")
        a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=lo)
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(arrays, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def module_bytes(module: torch.nn.Module) -> bytes:
    """Serialized form of one module's weights alone (no metadata)."""
    return dumps(module_arrays(module))


def load_module_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy ``prefix``-ed arrays into ``module``; any name or shape disagreement raises."""
    state = module.state_dict()
    wanted = {prefix + k for k in state}
    have = {k for k in arrays if k.startswith(prefix)}
    missing, extra = sorted(wanted - have), sorted(have - wanted)
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    new = {}
    for k, v in state.items():
        a = arrays[prefix + k]
        if tuple(a.shape) != tuple(v.shape):
            raise CheckpointError(
                f"checkpoint/model shape mismatch for {prefix + k}: checkpoint {tuple(a.shape)}, "
                f"model {tuple(v.shape)}"
            )
        new[k] = torch.from_numpy(np.array(a)).to(v.dtype)
    module.load_state_dict(new)
