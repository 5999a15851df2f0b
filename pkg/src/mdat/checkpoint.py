"""Binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    8 bytes   magic  b"MDATCKPT"
    uint32    format version (currently 1)
    uint32    header length in bytes
    header    UTF-8 JSON, keys sorted:
                {"version": 1, "endianness": "little", "meta": {...},
                 "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload   raw array bytes, little-endian, C order, at the listed offsets

The same bytes come out for the same arrays and metadata, so checkpoint files
can be compared by hash.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDATCKPT"
FORMAT_VERSION = 1


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "endianness": "little", "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, header["meta"]


def save_model(path: str | os.PathLike, model, extra: dict | None = None) -> None:
    """Write a model's parameters and config."""
    meta = {"kind": type(model).__name__, "config": model.cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    save_arrays(path, model.state_dict(), meta)


def load_model(path: str | os.PathLike):
    """Rebuild the model class recorded in the file and load its parameters."""
    from .model import ATModel, MDAT, ModelConfig

    arrays, meta = load_arrays(path)
    kinds = {"MDAT": MDAT, "ATModel": ATModel}
    if meta.get("kind") not in kinds:
        raise ValueError(f"{path}: unknown model kind {meta.get('kind')!r}")
    model = kinds[meta["kind"]](ModelConfig(**meta["config"]))
    model.load_state_dict(arrays)
    return model
