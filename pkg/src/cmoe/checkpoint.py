"""Binary checkpoint files for model and optimizer state.

Layout, all integers little-endian:

    magic "CMOECKPT" | u32 version | u32 count | count entries
    u32 opt_count | opt_count entries

Entry: u16 name length, utf-8 name, u8 dtype tag, u8 rank, rank u32 dims,
raw little-endian values. Model entries cover parameters then buffers in
module walk order; optimizer entries hold per-parameter moments and step
counters. Identical state serializes to identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from cmoe.errors import CheckpointError

MAGIC = b"CMOECKPT"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    tag = _DTYPE_TAGS.get(np.dtype(le.dtype.str.replace(">", "<")))
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(le.tobytes())


def _read_entry(fh):
    raw = fh.read(2)
    if len(raw) != 2:
        raise CheckpointError("truncated checkpoint: entry header")
    (nlen,) = struct.unpack("<H", raw)
    name = fh.read(nlen).decode("utf-8")
    tag, rank = struct.unpack("<BB", fh.read(2))
    if tag not in _TAG_DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    buf = fh.read(count * dtype.itemsize)
    if len(buf) != count * dtype.itemsize:
        raise CheckpointError(f"truncated checkpoint: data of {name!r}")
    return name, np.frombuffer(buf, dtype=dtype).reshape(dims).copy()


def _model_entries(model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, buf in model.named_buffers():
        yield name, buf


def _optimizer_entries(optimizer, param_names):
    for i, name in enumerate(param_names):
        yield f"opt.m.{name}", optimizer.m[i]
        yield f"opt.v.{name}", optimizer.v[i]
        yield f"opt.t.{name}", np.asarray(optimizer.t[i], dtype=np.int64)


def save_checkpoint(path, model, optimizer=None) -> None:
    model_items = list(_model_entries(model))
    opt_items = []
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        if len(names) != len(optimizer.params):
            raise CheckpointError("optimizer does not cover the model's parameters")
        opt_items = list(_optimizer_entries(optimizer, names))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(model_items)))
        for name, arr in model_items:
            _write_entry(fh, name, arr)
        fh.write(struct.pack("<I", len(opt_items)))
        for name, arr in opt_items:
            _write_entry(fh, name, arr)


def load_checkpoint(path, model, optimizer=None) -> None:
    """Restore parameters, buffers, and (optionally) optimizer state in place."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    with fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        stored = dict(_read_entry(fh) for _ in range(count))
        (opt_count,) = struct.unpack("<I", fh.read(4))
        opt_stored = dict(_read_entry(fh) for _ in range(opt_count))

    params = dict(model.named_parameters())
    targets = dict(params)
    targets.update(model.named_buffers())
    missing = sorted(set(targets) - set(stored))
    extra = sorted(set(stored) - set(targets))
    if missing or extra:
        raise CheckpointError(
            f"{path}: state mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, arr in stored.items():
        tgt = targets[name]
        dst = tgt.data if name in params else tgt
        if dst.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}")
        dst[...] = arr

    if optimizer is None:
        return
    names = list(params)
    for i, name in enumerate(names):
        for prefix, slot in (("opt.m.", optimizer.m), ("opt.v.", optimizer.v)):
            key = prefix + name
            if key not in opt_stored:
                raise CheckpointError(f"{path}: no optimizer state for {name!r}")
            if opt_stored[key].shape != slot[i].shape:
                raise CheckpointError(f"{path}: optimizer shape mismatch for {name!r}")
            slot[i] = opt_stored[key].astype(slot[i].dtype, copy=False)
        # stored via ascontiguousarray, which lifts the 0-d counter to shape (1,)
        optimizer.t[i] = int(opt_stored["opt.t." + name].reshape(-1)[0])
