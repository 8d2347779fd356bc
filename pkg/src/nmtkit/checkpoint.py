"""Binary checkpoint files and checkpoint averaging.

Header: magic ``T2CK``, u32 format version, u64 step, u32-length-prefixed
UTF-8 hparams-set name, u32 parameter count.  Each parameter: u32-prefixed
UTF-8 name, u32 rank, u64 extents, then float64 little-endian values.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"T2CK"
FORMAT_VERSION = 1
_NAME_RE = re.compile(r"model-(\d+)\.ckpt$")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    step: int
    hparams_set: str
    params: dict[str, np.ndarray]


def _put_str(out: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    out += struct.pack("<I", len(b))
    out += b


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> Path:
    out = bytearray(MAGIC)
    out += struct.pack("<IQ", FORMAT_VERSION, ckpt.step)
    _put_str(out, ckpt.hparams_set)
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype="<f8")
        _put_str(out, name)
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = buf[pos:pos + n].decode("utf-8")
        pos += n
        return s

    try:
        version, step = take("<IQ")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        hparams_set = take_str()
        (count,) = take("<I")
        params = {}
        for _ in range(count):
            name = take_str()
            (rank,) = take("<I")
            shape = take(f"<{rank}Q") if rank else ()
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            params[name] = arr.reshape(shape)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint") from e
    return Checkpoint(step, hparams_set, params)


def checkpoint_path(output_dir: Path | str, step: int) -> Path:
    return Path(output_dir) / f"model-{step}.ckpt"


def list_checkpoints(output_dir: Path | str) -> list[Path]:
    """Checkpoints in ``output_dir`` sorted by step."""
    found = []
    for p in Path(output_dir).glob("model-*.ckpt"):
        m = _NAME_RE.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return [p for _, p in sorted(found)]


def latest_checkpoint(output_dir: Path | str) -> Path:
    ckpts = list_checkpoints(output_dir)
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {output_dir}")
    return ckpts[-1]


def average_checkpoints(paths: Sequence[Path | str | Checkpoint]) -> Checkpoint:
    """Element-wise mean of parameters; step is the largest input step."""
    if not paths:
        raise CheckpointError("need at least one checkpoint to average")
    ckpts = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.hparams_set != first.hparams_set:
            raise CheckpointError(f"hparams set mismatch: {first.hparams_set!r} vs {c.hparams_set!r}")
        if set(c.params) != set(first.params):
            raise CheckpointError("parameter name sets differ")
        for k, v in c.params.items():
            if v.shape != first.params[k].shape:
                raise CheckpointError(f"shape mismatch for {k}: {first.params[k].shape} vs {v.shape}")
    # Per-element sort makes the result independent of input order; anchoring
    # on the minimum makes the mean of identical values exact.
    averaged = {}
    for k in first.params:
        stacked = np.sort(np.stack([c.params[k] for c in ckpts]), axis=0)
        base = stacked[0]
        averaged[k] = base + (stacked - base).sum(axis=0) / len(ckpts)
    return Checkpoint(max(c.step for c in ckpts), first.hparams_set, averaged)
