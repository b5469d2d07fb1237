"""CTKV v1 binary weight format.

Little-endian layout:

    magic "CTKV" | u32 version=1
    u32 x {n_layers, n_heads, n_kv_heads, d_model, head_dim, ffn_dim, vocab_size, max_seq}
    u8 cache_dtype (0=fp32, 1=fp16) | u8 pos_scheme (0=none, 1=rotary) | f32 norm_eps
    tensor records until EOF:
        u32 name_len | name UTF-8 | u8 ndim | u32 dims[ndim] | f32 data row-major

Tensor names are the canonical ones from the runtime; anything else is a
load error, as are duplicate or missing tensors.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .config import ModelConfig
from .errors import (
    BadMagicError,
    ShapeError,
    TruncatedStreamError,
    UnknownTensorError,
    VersionError,
)
from .runtime import Model, tensor_names, tensor_shape

MAGIC = b"CTKV"
VERSION = 1

_DTYPE_CODES = {"fp32": 0, "fp16": 1}
_POS_CODES = {"none": 0, "rotary": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_POS_NAMES = {v: k for k, v in _POS_CODES.items()}


def save_model(model: Model, stream) -> None:
    cfg = model.config
    stream.write(MAGIC)
    stream.write(struct.pack("<I", VERSION))
    stream.write(
        struct.pack(
            "<8I",
            cfg.n_layers,
            cfg.n_heads,
            cfg.n_kv_heads,
            cfg.d_model,
            cfg.head_dim,
            cfg.ffn_dim,
            cfg.vocab_size,
            cfg.max_seq,
        )
    )
    stream.write(struct.pack("<BBf", _DTYPE_CODES[cfg.cache_dtype], _POS_CODES[cfg.pos_scheme], cfg.norm_eps))
    for name in tensor_names(cfg):
        data = np.ascontiguousarray(model.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<B", data.ndim))
        stream.write(struct.pack(f"<{data.ndim}I", *data.shape))
        stream.write(data.tobytes())


def save_model_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    save_model(model, buf)
    return buf.getvalue()


def _read_exact(stream, n: int, what: str) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedStreamError(f"stream ended inside {what} ({len(data)}/{n} bytes)")
    return data


def load_model(stream) -> Model:
    """Parse a CTKV v1 stream into a validated Model."""
    magic = stream.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(stream, 4, "version"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}, expected {VERSION}")
    dims = struct.unpack("<8I", _read_exact(stream, 32, "header dims"))
    dtype_code, pos_code, norm_eps = struct.unpack("<BBf", _read_exact(stream, 6, "header flags"))
    if dtype_code not in _DTYPE_NAMES:
        raise VersionError(f"unknown cache dtype code {dtype_code}")
    if pos_code not in _POS_NAMES:
        raise VersionError(f"unknown position scheme code {pos_code}")
    config = ModelConfig(
        n_layers=dims[0],
        n_heads=dims[1],
        n_kv_heads=dims[2],
        d_model=dims[3],
        head_dim=dims[4],
        ffn_dim=dims[5],
        vocab_size=dims[6],
        max_seq=dims[7],
        cache_dtype=_DTYPE_NAMES[dtype_code],
        pos_scheme=_POS_NAMES[pos_code],
        norm_eps=norm_eps,
    )

    expected = set(tensor_names(config))
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = stream.read(4)
        if len(head) == 0:
            break
        if len(head) != 4:
            raise TruncatedStreamError("stream ended inside a record header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(stream, name_len, "tensor name").decode("utf-8")
        if name not in expected:
            raise UnknownTensorError(f"unknown tensor name {name!r}")
        if name in tensors:
            raise ShapeError(f"duplicate tensor {name!r}")
        (ndim,) = struct.unpack("<B", _read_exact(stream, 1, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim, f"{name} dims"))
        want = tensor_shape(config, name)
        if tuple(shape) != want:
            raise ShapeError(f"tensor {name}: file shape {shape}, expected {want}")
        count = int(np.prod(shape)) if shape else 1
        raw = _read_exact(stream, 4 * count, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

    missing = sorted(expected - set(tensors))
    if missing:
        raise ShapeError(f"missing tensors: {missing}")
    model = Model(config=config, tensors=tensors)
    model.validate()
    return model


def load_model_path(path) -> Model:
    with open(path, "rb") as fh:
        return load_model(fh)


def save_model_path(model: Model, path) -> None:
    with open(path, "wb") as fh:
        save_model(model, fh)
