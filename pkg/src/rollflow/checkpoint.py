"""Binary archive for network weights and optimizer state.

Layout: magic "RFLV", u32 version, length-prefixed JSON config record,
u32 tensor count, then named tensors (u16 name length + UTF-8 name,
u8 rank, u32 dims, 32-bit little-endian float data in C order).
"""
from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .model import BlockVariant, ModelConfig, RFlavNetwork
from .numerics import Tensor

MAGIC = b"RFLV"
VERSION = 1

_HEAD = struct.Struct("<4sI")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")


class CheckpointError(ValueError):
    pass


def write_archive(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a config record plus named float32 tensors."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION))
        f.write(_U32.pack(len(blob)))
        f.write(blob)
        f.write(_U32.pack(len(tensors)))
        for name, arr in tensors.items():
            # asarray keeps 0-d tensors 0-d; ascontiguousarray would not
            data = np.asarray(arr, dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name!r}")
            f.write(_U16.pack(len(encoded)))
            f.write(encoded)
            if data.ndim > 0xFF:
                raise CheckpointError(f"tensor rank too large: {data.ndim}")
            f.write(_U8.pack(data.ndim))
            for dim in data.shape:
                f.write(_U32.pack(dim))
            f.write(data.tobytes())


def _take(buf: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    end = offset + n
    if end > len(buf):
        raise CheckpointError(f"archive truncated reading {what}")
    return buf[offset:end], end


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    raw, offset = _take(buf, 0, _HEAD.size, "header")
    magic, version = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    raw, offset = _take(buf, offset, _U32.size, "config length")
    (blob_len,) = _U32.unpack(raw)
    raw, offset = _take(buf, offset, blob_len, "config record")
    try:
        config = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed config record: {exc}") from exc
    raw, offset = _take(buf, offset, _U32.size, "tensor count")
    (count,) = _U32.unpack(raw)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _take(buf, offset, _U16.size, "name length")
        (name_len,) = _U16.unpack(raw)
        raw, offset = _take(buf, offset, name_len, "tensor name")
        name = raw.decode("utf-8")
        raw, offset = _take(buf, offset, _U8.size, "tensor rank")
        (ndim,) = _U8.unpack(raw)
        dims = []
        for _ in range(ndim):
            raw, offset = _take(buf, offset, _U32.size, "tensor dim")
            dims.append(_U32.unpack(raw)[0])
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw, offset = _take(buf, offset, 4 * size, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        tensors[name] = arr
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes")
    return config, tensors


def model_config_to_dict(cfg: ModelConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["variant"] = cfg.variant.value
    return out


def model_config_from_dict(data: dict) -> ModelConfig:
    fields = dict(data)
    try:
        fields["variant"] = BlockVariant(fields["variant"])
        return ModelConfig(**fields)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config record: {exc}") from exc


def save_network(path, net: RFlavNetwork) -> None:
    config = {"kind": "network", "model": model_config_to_dict(net.cfg)}
    tensors = {name: p.data for name, p in net.params.items()}
    write_archive(path, config, tensors)


def load_network(path) -> RFlavNetwork:
    config, tensors = read_archive(path)
    if config.get("kind") != "network":
        raise CheckpointError(f"not a network archive: {config.get('kind')!r}")
    cfg = model_config_from_dict(config["model"])
    params = {name: Tensor(arr, requires_grad=True)
              for name, arr in tensors.items()}
    return RFlavNetwork(cfg, params, dtype=np.float32)
