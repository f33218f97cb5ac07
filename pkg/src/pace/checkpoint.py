"""Binary model checkpoints.

Layout: the 8 magic bytes ``PACE0001``, a little-endian uint32 giving
the length of a canonical (sorted-key, separator-free) UTF-8 JSON
metadata blob, the blob itself, then the raw little-endian float32
tensor payloads concatenated in manifest order.  Metadata holds the
model config, the build seed, the tensor manifest (name, shape, byte
offset into the payload region, byte length) and an open ``extra``
mapping for pipeline state such as normalizer statistics.

Round trips are bit-exact: loading writes the payload bytes straight
back into the rebuilt model's parameter arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .model import ModelConfig, PaceModel, build_model

MAGIC = b"PACE0001"
_LEN_FMT = "<I"


def save_checkpoint(path, model: PaceModel, extra: dict | None = None) -> None:
    """Serialize ``model`` (and optional ``extra`` metadata) to ``path``."""
    manifest = []
    offset = 0
    payloads = []
    for name, tensor in model.params.items():
        raw = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        manifest.append({
            "name": name,
            "shape": list(tensor.data.shape),
            "byte_offset": offset,
            "byte_length": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    meta = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "manifest": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(_LEN_FMT, len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[PaceModel, dict]:
    """Rebuild the model from ``path``; returns ``(model, metadata)``."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    (blob_len,) = struct.unpack_from(_LEN_FMT, data, len(MAGIC))
    meta_start = len(MAGIC) + 4
    if meta_start + blob_len > len(data):
        raise DataFormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[meta_start:meta_start + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: metadata is not valid JSON: {exc}") from exc
    for key in ("config", "seed", "manifest"):
        if key not in meta:
            raise DataFormatError(f"{path}: metadata missing {key!r}")

    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config, int(meta["seed"]))

    manifest = meta["manifest"]
    names = [entry.get("name") for entry in manifest]
    if names != model.param_names():
        raise DataFormatError(f"{path}: manifest does not match the architecture")

    payload = data[meta_start + blob_len:]
    expected = sum(entry["byte_length"] for entry in manifest)
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, manifest says {expected}")
    for entry in manifest:
        tensor = model.params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != tensor.data.shape:
            raise DataFormatError(
                f"{path}: tensor {entry['name']} has shape {shape}, "
                f"expected {tensor.data.shape}")
        if entry["byte_length"] != tensor.data.size * 4:
            raise DataFormatError(
                f"{path}: tensor {entry['name']} byte length mismatch")
        start = entry["byte_offset"]
        raw = payload[start:start + entry["byte_length"]]
        tensor.data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return model, meta
