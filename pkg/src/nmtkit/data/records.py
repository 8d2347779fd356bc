"""Length-prefixed binary record files of (source ids, target ids) pairs.

Layout: magic ``T2R1`` then records, each a little-endian u32 byte length
followed by a payload of LEB128 varints: count, ids..., count, ids....
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator, Sequence

MAGIC = b"T2R1"


class RecordFormatError(ValueError):
    pass


def encode_varint(n: int, out: bytearray) -> None:
    if n < 0:
        raise ValueError("varints are unsigned")
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def decode_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        if pos >= len(buf):
            raise RecordFormatError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def pack_example(src: Sequence[int], tgt: Sequence[int]) -> bytes:
    out = bytearray()
    for seq in (src, tgt):
        encode_varint(len(seq), out)
        for i in seq:
            encode_varint(int(i), out)
    return bytes(out)


def unpack_example(payload: bytes) -> tuple[list[int], list[int]]:
    pos = 0
    seqs = []
    for _ in range(2):
        n, pos = decode_varint(payload, pos)
        seq = []
        for _ in range(n):
            v, pos = decode_varint(payload, pos)
            seq.append(v)
        seqs.append(seq)
    if pos != len(payload):
        raise RecordFormatError("trailing bytes in record payload")
    return seqs[0], seqs[1]


def write_records(path: Path | str, examples: Iterable[tuple[Sequence[int], Sequence[int]]]) -> int:
    count = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        for src, tgt in examples:
            payload = pack_example(src, tgt)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)
            count += 1
    return count


def read_records(path: Path | str) -> Iterator[tuple[list[int], list[int]]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise RecordFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    while pos < len(data):
        if pos + 4 > len(data):
            raise RecordFormatError(f"{path}: truncated record header")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise RecordFormatError(f"{path}: truncated record")
        yield unpack_example(data[pos:pos + n])
        pos += n
