"""Binary checkpoint container.

Layout (all integers little endian)::

    8 bytes   magic  b"I2VCKPT\\0"
    u32       format version (1)
    u64       header length N
    N bytes   UTF-8 JSON header:
                {"config": {...ModelConfig fields...},
                 "manifest": {"frozen": [names], "trainable": [names]},
                 "entries": [{"name": str, "shape": [ints]}, ...]}
    payload   for each entry in header order: prod(shape) float64 values, "<f8", C order

Adapter entries are named ``adapter.<host>.Wp_Q`` / ``adapter.<host>.Wp_O``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .attention import AdapterParams
from .errors import DimensionError, StructuralError
from .numerics import Tensor
from .video_model import ModelConfig, VideoUNet, partition_parameters

MAGIC = b"I2VCKPT\x00"
VERSION = 1


def save_checkpoint(model: VideoUNet, path) -> str:
    """Write ``model`` to ``path`` and return the file's sha256."""
    part, _ = partition_parameters(model)
    named = {**part.frozen, **part.trainable}
    entries = [{"name": k, "shape": list(t.data.shape)} for k, t in named.items()]
    header = {
        "config": dataclasses.asdict(model.config),
        "manifest": {"frozen": list(part.frozen), "trainable": list(part.trainable)},
        "entries": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for e in entries:
            fh.write(np.ascontiguousarray(named[e["name"]].data, dtype="<f8").tobytes())
    return file_sha256(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` without building a model."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise StructuralError(f"{path}: not an i2v_lab checkpoint")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise StructuralError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(n).decode())
        arrays = {}
        for e in header["entries"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise StructuralError(f"{path}: truncated at entry {e['name']}")
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        if fh.read(1):
            raise StructuralError(f"{path}: trailing bytes after payload")
    return header, arrays


def _config_from(header) -> ModelConfig:
    cfg = dict(header["config"])
    for k in ("channels", "adapter_layers"):
        cfg[k] = tuple(cfg[k])
    return ModelConfig(**cfg)


def load_checkpoint(path) -> VideoUNet:
    header, arrays = read_checkpoint(path)
    model = VideoUNet(_config_from(header), seed=0)
    expected = set(model.params)
    frozen = set(header["manifest"]["frozen"])
    if frozen != expected:
        raise StructuralError(f"{path}: frozen manifest does not match the architecture: {sorted(frozen ^ expected)[:3]}")
    for name in expected:
        if arrays[name].shape != model.params[name].data.shape:
            raise DimensionError(f"{name}: stored {arrays[name].shape} vs model {model.params[name].data.shape}")
        model.params[name] = Tensor(arrays[name], False, name)
    model.set_base_trainable(False)
    if header["manifest"]["trainable"]:
        load_adapters(model, {k: arrays[k] for k in header["manifest"]["trainable"]})
    return model


def load_adapters(model: VideoUNet, source) -> VideoUNet:
    """Install adapter weights from a checkpoint path or a name->array dict onto ``model``."""
    if not isinstance(source, dict):
        header, arrays = read_checkpoint(source)
        source = {k: arrays[k] for k in header["manifest"]["trainable"]}
    hosts = sorted({k.split(".")[1] for k in source})
    if set(hosts) != set(model.config.adapter_layers):
        raise StructuralError(f"adapter hosts {hosts} do not match model hosts {list(model.config.adapter_layers)}")
    d = model.config.d
    adapters = {}
    for h in model.config.adapter_layers:
        q, o = source[f"adapter.{h}.Wp_Q"], source[f"adapter.{h}.Wp_O"]
        if q.shape != (d, d) or o.shape != (d, d):
            raise DimensionError(f"adapter {h}: expected ({d}, {d}) matrices, got {q.shape} and {o.shape}")
        adapters[h] = AdapterParams(Tensor(np.array(q), True, f"adapter.{h}.Wp_Q"), Tensor(np.array(o), True, f"adapter.{h}.Wp_O"))
    model.adapters = adapters
    return model


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
