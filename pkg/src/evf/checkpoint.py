"""Single-file checkpoint container: JSON manifest plus raw float64 bytes.

Layout: 4-byte magic, little-endian uint32 manifest length, the manifest
JSON (sorted keys), then each tensor's C-order ``<f8`` bytes at the offset
the manifest records. Writing the same model twice produces byte-identical
files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import MicroModel, ModelConfig, apply_stage, build_model, enter_stage3

MAGIC = b"EVFC"
FORMAT_VERSION = 1


def save_model(model: MicroModel, path: Path | str) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, param, _ in model.named_parameters():
        data = np.ascontiguousarray(param.data, dtype=np.float64).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(param.data.shape),
                "trainable": bool(param.trainable),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": model.stage,
        "config": model.cfg.to_json_dict(),
        "dtype": "<f8",
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_model(path: Path | str) -> MicroModel:
    """Rebuild a model bit-exactly from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint format version {manifest.get('format_version')}")
    cfg = ModelConfig.from_json_dict(manifest["config"])
    model = build_model(cfg)
    stage = manifest["stage"]
    if stage == 3:
        enter_stage3(model)
    else:
        apply_stage(model, stage)

    params = {name: p for name, p, _ in model.named_parameters()}
    data_start = 8 + header_len
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params:
            raise ContractError(f"{path}: checkpoint tensor {name!r} not present in model structure")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        params[name].assign(arr.copy())
        params[name].set_trainable(entry["trainable"])
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ContractError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
    return model
