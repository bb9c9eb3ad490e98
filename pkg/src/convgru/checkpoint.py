"""Binary model checkpoints.

Layout: magic ``CGRU``, uint32 format version, uint64 header length, a JSON
header (model config, ordered parameter manifest with byte offsets, free-form
``extra`` provenance), then the raw little-endian parameter blob in manifest
order. Manifest ranges are contiguous, non-overlapping, and cover the blob
exactly; save/load round-trips are bit-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import Model, ModelConfig, build

MAGIC = b"CGRU"
VERSION = 1

_WIRE_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save(model: Model, path, extra: dict | None = None) -> None:
    params = model.parameters()
    manifest = []
    offset = 0
    blobs = []
    for name, t in params.items():
        wire = _WIRE_DTYPES[str(t.dtype)]
        raw = np.ascontiguousarray(t.data, dtype=wire).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = {
        "config": model.config.to_dict(),
        "manifest": manifest,
        "blob_size": offset,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)


def read_header(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    for key in ("config", "manifest", "blob_size"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    header["_blob_start"] = 16 + hlen
    header["_file_size"] = len(data)
    return header


def load(path) -> Model:
    """Rebuild the model; parameters are restored bit-exactly."""
    header = read_header(path)
    data = Path(path).read_bytes()
    start, blob_size = header["_blob_start"], header["blob_size"]
    if start + blob_size != len(data):
        raise CheckpointError(f"{path}: blob size {blob_size} does not match file")
    config = ModelConfig.from_dict(header["config"])
    model = build(config)
    params = model.parameters()
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != list(params.keys()):
        raise CheckpointError(f"{path}: manifest does not match architecture parameters")
    expected_offset = 0
    for m in manifest:
        t = params[m["name"]]
        if tuple(m["shape"]) != t.shape:
            raise CheckpointError(f"{path}: {m['name']} shape {m['shape']} != model {t.shape}")
        if m["offset"] != expected_offset:
            raise CheckpointError(f"{path}: manifest offsets not contiguous at {m['name']}")
        wire = _WIRE_DTYPES.get(m["dtype"])
        if wire is None:
            raise CheckpointError(f"{path}: unsupported dtype {m['dtype']}")
        nbytes = int(np.prod(m["shape"]) or 1) * int(wire[-1])
        raw = data[start + m["offset"] : start + m["offset"] + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated blob at {m['name']}")
        t.data = np.frombuffer(raw, dtype=wire).reshape(m["shape"]).astype(m["dtype"])
        expected_offset += nbytes
    if expected_offset != blob_size:
        raise CheckpointError(f"{path}: manifest does not cover blob ({expected_offset} != {blob_size})")
    model.checkpoint_extra = header.get("extra", {})
    return model
