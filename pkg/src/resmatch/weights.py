"""Versioned, checksummed weight files.

Layout (little-endian)::

    "RMW1" | u32 version | u32 len | config JSON | u32 n_tensors |
    n_tensors x (u16 len | name | u8 ndim | ndim x u32 | f64 payload) | u32 CRC32
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, FormatError, ShapeError
from .model import ModelConfig, ModelParams

MAGIC = b"RMW1"
VERSION = 1


def weights_bytes(params: ModelParams) -> bytes:
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    named = params.named()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, p in named.items():
        raw = name.encode()
        value = np.asarray(p.value, dtype="<f8")  # tobytes() is C-order; keeps 0-d shape
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(value.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_weights(params: ModelParams, path) -> None:
    Path(path).write_bytes(weights_bytes(params))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_weights(data: bytes, config: ModelConfig | None = None) -> ModelParams:
    """Decode a weight file.

    The embedded config builds the parameter skeleton unless ``config`` is
    given, in which case every stored tensor must fit that config.
    """
    if len(data) < 8:
        raise FormatError("file too short", offset=len(data))
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", offset=0)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("weight file checksum mismatch", offset=len(data) - 4)
    r = _Reader(body)
    r.take(4, "magic")
    version, cfg_len = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported weight format version {version}", offset=4)
    try:
        stored_cfg = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config blob: {exc}", offset=12) from exc
    params = ModelParams.init(config or stored_cfg)
    named = params.named()
    (count,) = r.unpack("<I", "tensor count")
    seen = set()
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode()
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        size = int(np.prod(shape)) if ndim else 1
        payload = np.frombuffer(r.take(8 * size, f"payload of {name}"), dtype="<f8").reshape(shape)
        if name not in named:
            raise ShapeError(f"tensor {name!r} (at byte {start}) does not exist in the model config")
        target = named[name]
        if target.value.shape != tuple(shape):
            raise ShapeError(f"tensor {name!r}: stored shape {tuple(shape)} != expected {target.value.shape}")
        target.value = payload.astype(np.float64)
        target.zero_grad()
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise ShapeError(f"weight file lacks tensors: {sorted(missing)[:5]}")
    if r.pos != len(body):
        raise FormatError("trailing bytes after tensor table", offset=r.pos)
    return params


def load_weights(path, config: ModelConfig | None = None) -> ModelParams:
    return parse_weights(Path(path).read_bytes(), config)
