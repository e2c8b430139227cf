"""Versioned binary checkpoints.

Layout: header (magic, version, flags, model-config digest, train-config
digest, completed-epoch count, record count) followed by records sorted by
parameter path: u32 path length, UTF-8 path, u32 rank, u64 extents, f64
little-endian payload. Saving a freshly loaded checkpoint reproduces the
file byte for byte. Optimizer state rides along under the ``optimizer/``
namespace when training state is included.
"""
from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .model import ModelConfig, ParameterSet
from .tensor import Tensor

MAGIC = b"AUCK"
VERSION = 1

_FLAG_TRAIN_STATE = 1
_HEADER = struct.Struct("<4sII32s32sQQ")


def _digest_bytes(hex_digest: str | None) -> bytes:
    if hex_digest is None:
        return b"\x00" * 32
    return bytes.fromhex(hex_digest)


def _write_record(fh, path: str, array: np.ndarray) -> None:
    encoded = path.encode("utf-8")
    payload = np.ascontiguousarray(array, dtype="<f8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", payload.ndim))
    fh.write(struct.pack(f"<{payload.ndim}Q", *payload.shape))
    fh.write(payload.tobytes())


def _read_record(fh):
    head = fh.read(4)
    if not head:
        return None
    (path_len,) = struct.unpack("<I", head)
    path = fh.read(path_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return path, data.copy()


def save_checkpoint(
    path: str | os.PathLike,
    params: ParameterSet,
    model_cfg: ModelConfig,
    adam_state=None,
    train_digest: str | None = None,
    epoch: int = 0,
) -> None:
    records: dict[str, np.ndarray] = {p: t.data for p, t in params.items()}
    flags = 0
    if adam_state is not None:
        flags |= _FLAG_TRAIN_STATE
        for p, m in adam_state.m.items():
            records[f"optimizer/m/{p}"] = m
        for p, v in adam_state.v.items():
            records[f"optimizer/v/{p}"] = v
        records["optimizer/t"] = np.asarray(float(adam_state.t))
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                VERSION,
                flags,
                _digest_bytes(model_cfg.digest()),
                _digest_bytes(train_digest),
                epoch,
                len(records),
            )
        )
        for name in sorted(records):
            _write_record(fh, name, records[name])


def load_checkpoint(
    path: str | os.PathLike,
    model_cfg: ModelConfig,
    expect_train_digest: str | None = None,
):
    """Returns (params, adam_state or None, completed epochs). Raises on
    magic/version mismatch or when the stored config digest differs."""
    from .train import AdamState  # cycle: trainer owns the optimizer type

    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, flags, model_digest, train_digest, epoch, n_records = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        if model_digest != _digest_bytes(model_cfg.digest()):
            raise ValueError(f"{path}: checkpoint was written for a different model configuration")
        if expect_train_digest is not None and train_digest != _digest_bytes(expect_train_digest):
            raise ValueError(f"{path}: checkpoint was written for a different training configuration")
        records: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            item = _read_record(fh)
            if item is None:
                raise ValueError(f"{path}: truncated checkpoint records")
            records[item[0]] = item[1]

    params: ParameterSet = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    opt_t = 0
    for name, array in records.items():
        if name == "optimizer/t":
            opt_t = int(array.item())
        elif name.startswith("optimizer/m/"):
            opt_m[name[len("optimizer/m/"):]] = array
        elif name.startswith("optimizer/v/"):
            opt_v[name[len("optimizer/v/"):]] = array
        else:
            params[name] = Tensor(array, requires_grad=True)

    state = None
    if flags & _FLAG_TRAIN_STATE:
        state = AdamState.from_buffers(opt_m, opt_v, opt_t)
    return params, state, int(epoch)


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
