"""Binary checkpoints for :class:`DenseNetModel`.

Layout::

    b"QMCK" u16 version u32 header_len header_json
    parameter blobs (declaration order), normalization running stats,
    [Adam m blobs, Adam v blobs]            if the optimizer flag is set
    u64 checksum                            blake2b-64 of everything before it

The JSON header holds the config, epoch, optimizer flag/step, dtype, blob
names and shapes, and free-form metadata. Keys are sorted so identical
models produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from qmat.tensor_nn.densenet import DenseNetConfig, DenseNetModel, bn_layer_names
from qmat.tensor_nn.functional import BatchNormState
from qmat.tensor_nn.optim import AdamState

MAGIC = b"QMCK"
VERSION = 1
_PRE = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(path, model: DenseNetModel, epoch: int = 0, optimizer: AdamState | None = None,
                    meta: dict | None = None) -> Path:
    dt = model.dtype.newbyteorder("<")
    names = list(model.params)
    bn_names = bn_layer_names(model.config)
    header = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "dtype": model.dtype.name,
        "params": [[n, list(model.params[n].shape)] for n in names],
        "bn": bn_names,
        "has_optimizer_state": optimizer is not None,
        "adam_t": int(optimizer.t) if optimizer is not None else 0,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PRE.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(model.params[n], dtype=dt).tobytes())
    for n in bn_names:
        s = model.bn_states[n]
        parts.append(np.ascontiguousarray(s.running_mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.running_var, dtype="<f8").tobytes())
    if optimizer is not None:
        for store in (optimizer.m, optimizer.v):
            for n in names:
                arr = store.get(n)
                if arr is None:
                    arr = np.zeros(model.params[n].shape)
                parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload + struct.pack("<Q", _checksum(payload)))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(model, info)``; ``info`` has ``epoch``, ``meta`` and ``optimizer``."""
    data = Path(path).read_bytes()
    if len(data) < _PRE.size + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PRE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    payload, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum(payload) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    try:
        header = json.loads(payload[_PRE.size:_PRE.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    config = DenseNetConfig(**header["config"])
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    off = _PRE.size + hlen

    def take(shape, dtype):
        nonlocal off
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated blob data")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr.astype(np.dtype(dtype).newbyteorder("="), copy=True)

    params = {n: take(tuple(shape), dt) for n, shape in header["params"]}
    states = {}
    for n in header["bn"]:
        c = params[f"{n}.gamma"].shape[0]
        states[n] = BatchNormState(take((c,), "<f8"), take((c,), "<f8"))
    optimizer = None
    if header["has_optimizer_state"]:
        optimizer = AdamState(t=int(header["adam_t"]))
        for store in (optimizer.m, optimizer.v):
            for n, shape in header["params"]:
                store[n] = take(tuple(shape), "<f8")
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} unexpected trailing bytes")
    model = DenseNetModel(config, params, states, dtype=np.dtype(header["dtype"]))
    return model, {"epoch": header["epoch"], "meta": header["meta"], "optimizer": optimizer}
