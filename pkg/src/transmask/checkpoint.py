"""Self-describing checkpoint files.

Layout::

    TMCKPT <format_version>\\n
    <one line of JSON: {"config": {...}, "tensors": [[name, shape], ...], "payload_bytes": n}>\\n
    <payload: little-endian float32 values, tensors concatenated in manifest order>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .separator import ModelConfig
from .tensor import Tensor

MAGIC = b"TMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint is malformed, truncated, or does not match the expected config."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float32 ndarray
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_tensors(cls, config, params, **meta):
        return cls(config, {k: np.array(v.data, dtype=np.float32) for k, v in params.items()}, meta=meta)

    def tensors(self, requires_grad=False):
        return {k: Tensor(v, requires_grad=requires_grad, name=k, dtype=np.float32)
                for k, v in self.params.items()}


def save_checkpoint(ckpt, path):
    manifest = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "tensors": [[name, list(arr.shape)] for name, arr in ckpt.params.items()],
    }
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for arr in ckpt.params.values())
    manifest["payload_bytes"] = len(payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC + f" {ckpt.format_version}\n".encode())
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    first = blob.find(b"\n")
    if first < 0 or not blob.startswith(MAGIC + b" "):
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version = int(blob[len(MAGIC) + 1:first])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable format version") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    second = blob.find(b"\n", first + 1)
    if second < 0:
        raise CheckpointError(f"{path}: manifest line is truncated")
    try:
        manifest = json.loads(blob[first + 1:second])
        config = ModelConfig.from_dict(manifest["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad manifest ({exc})") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected_config}")

    payload = memoryview(blob)[second + 1:]
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in manifest["tensors"]]
    expected_bytes = 4 * sum(sizes)
    if len(payload) != expected_bytes or manifest.get("payload_bytes") != expected_bytes:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, manifest expects {expected_bytes}")
    params, offset = {}, 0
    for (name, shape), size in zip(manifest["tensors"], sizes):
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32)
        offset += 4 * size
    return Checkpoint(config, params, version, manifest.get("meta", {}))
