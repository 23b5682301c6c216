"""``.pgl`` checkpoint format.

Layout: compact UTF-8 JSON header, the two bytes ``b"\\n\\0"``, then the raw
little-endian float32 payload with tensors concatenated in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NumericError, PglError, ShapeError
from .model import NORM_NAMES, LayerWeights, ModelConfig, WeightStore

FORMAT = "pgl"
VERSION = 1
SEPARATOR = b"\n\0"
_LE_F32 = np.dtype("<f4")


def to_bytes(w: WeightStore) -> bytes:
    w.validate()
    manifest, chunks, offset = [], [], 0
    for name, t in w.tensors():
        raw = np.ascontiguousarray(t, dtype=_LE_F32).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "config": w.config.to_dict(), "tensors": manifest}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + SEPARATOR + b"".join(chunks)


def from_bytes(blob: bytes) -> WeightStore:
    cut = blob.find(SEPARATOR)
    if cut < 0:
        raise CheckpointError("malformed header: separator not found")
    try:
        header = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise CheckpointError("malformed header: not a pgl checkpoint")
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    try:
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed header: {exc!r}") from None

    payload = memoryview(blob)[cut + len(SEPARATOR):]
    tensors, end = {}, 0
    for entry in manifest:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in tensors:
            raise CheckpointError(f"tensor {name} listed twice")
        if offset != end:
            raise CheckpointError(f"tensor {name} at offset {offset}, expected {end}")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _LE_F32.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"tensor {name} runs past end of payload")
        arr = np.frombuffer(payload, dtype=_LE_F32, count=count, offset=offset)
        tensors[name] = arr.astype(np.float32).reshape(shape)
        end = offset + nbytes
    if end != len(payload):
        raise CheckpointError(f"{len(payload) - end} trailing payload bytes")
    return assemble(config, tensors)


def assemble(config: ModelConfig, tensors: dict) -> WeightStore:
    """Build and validate a WeightStore from a flat name -> array map."""
    expected = WeightStore(config, None, [None] * config.num_layers).expected_shapes()
    extra = set(tensors) - set(expected)
    if extra:
        raise ShapeError(f"unexpected tensors: {sorted(extra)}")
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeError(f"tensor {name} is missing")
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        bad = np.flatnonzero(~np.isfinite(tensors[name]))
        if bad.size:
            raise NumericError(f"tensor {name} has non-finite value at flat index {int(bad[0])}")
    layers = []
    for i in range(config.num_layers):
        p = f"layers.{i}."
        kw = {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
        for name in NORM_NAMES:
            kw.setdefault(name, None)
        layers.append(LayerWeights(**kw))
    w = WeightStore(config, tensors["embedding"], layers, tensors["final_gamma"], tensors["output_head"])
    return w.validate()


def save_checkpoint(w: WeightStore, path) -> None:
    Path(path).write_bytes(to_bytes(w))


def load_checkpoint(path) -> WeightStore:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        return from_bytes(blob)
    except PglError as exc:
        raise type(exc)(f"{path}: {exc}") from None
