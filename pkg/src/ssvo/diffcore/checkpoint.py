"""Binary checkpoint format for parameters, running buffers, and optimizer state.

Layout (all integers little-endian uint64 unless noted):

    magic   4 bytes  b"SSVO"
    version 1 byte   (currently 1)
    config  u64 length + UTF-8 "key=value" lines describing the run
    counts  u64 n_params, u64 n_buffers, u8 has_optimizer
    record* per param/buffer:
        u64 name length, UTF-8 name,
        u64 ndim, u64 dims...,
        raw little-endian float64 values (C order)
    optimizer (if present):
        u64 step_count, f64 lr, f64 beta1, f64 beta2, f64 eps,
        records for m buffers then v buffers (counts equal n_params)

Arrays round-trip bit-exactly; loading verifies magic, version, and that
every record's payload length matches its declared shape.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .adam import AdamState
from .tensor import Tensor

MAGIC = b"SSVO"
VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or incompatible."""


def _write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def _read_u64(fh) -> int:
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint: expected 8-byte integer")
    return struct.unpack("<Q", raw)[0]


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    _write_u64(fh, len(encoded))
    fh.write(encoded)
    _write_u64(fh, arr.ndim)
    for d in arr.shape:
        _write_u64(fh, d)
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    name_len = _read_u64(fh)
    name = fh.read(name_len).decode("utf-8")
    ndim = _read_u64(fh)
    shape = tuple(_read_u64(fh) for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise CheckpointError(f"truncated checkpoint: array {name!r} is incomplete")
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def save_checkpoint(path, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                    config_text: str = "", optimizer: AdamState | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        encoded = config_text.encode("utf-8")
        _write_u64(fh, len(encoded))
        fh.write(encoded)
        _write_u64(fh, len(params))
        _write_u64(fh, len(buffers))
        fh.write(bytes([1 if optimizer is not None else 0]))
        for name in sorted(params):
            _write_array(fh, name, params[name].data)
        for name in sorted(buffers):
            _write_array(fh, name, buffers[name])
        if optimizer is not None:
            _write_u64(fh, optimizer.step_count)
            fh.write(struct.pack("<dddd", optimizer.lr, optimizer.beta1,
                                 optimizer.beta2, optimizer.eps))
            for name in sorted(optimizer.m):
                _write_array(fh, name, optimizer.m[name])
            for name in sorted(optimizer.v):
                _write_array(fh, name, optimizer.v[name])
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, buffers, config_text, optimizer).

    ``params`` values are fresh Tensors with requires_grad=True; ``optimizer``
    is an AdamState or None.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
        version = fh.read(1)
        if len(version) != 1 or version[0] != VERSION:
            raise CheckpointError(f"unsupported checkpoint version: {version!r}")
        config_len = _read_u64(fh)
        config_text = fh.read(config_len).decode("utf-8")
        n_params = _read_u64(fh)
        n_buffers = _read_u64(fh)
        has_opt = fh.read(1)
        if len(has_opt) != 1:
            raise CheckpointError("truncated checkpoint: missing optimizer flag")
        params: dict[str, Tensor] = {}
        for _ in range(n_params):
            name, arr = _read_array(fh)
            params[name] = Tensor(arr, requires_grad=True)
        buffers: dict[str, np.ndarray] = {}
        for _ in range(n_buffers):
            name, arr = _read_array(fh)
            buffers[name] = arr
        optimizer = None
        if has_opt[0]:
            optimizer = AdamState(params)
            optimizer.step_count = _read_u64(fh)
            raw = fh.read(32)
            if len(raw) != 32:
                raise CheckpointError("truncated checkpoint: optimizer header")
            optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps = (
                struct.unpack("<dddd", raw))
            for _ in range(n_params):
                name, arr = _read_array(fh)
                if name not in params:
                    raise CheckpointError(f"optimizer buffer {name!r} has no parameter")
                optimizer.m[name] = arr
            for _ in range(n_params):
                name, arr = _read_array(fh)
                if name not in params:
                    raise CheckpointError(f"optimizer buffer {name!r} has no parameter")
                optimizer.v[name] = arr
        extra = fh.read(1)
        if extra:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return params, buffers, config_text, optimizer
