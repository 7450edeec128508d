"""Versioned little-endian binary files for segment shards and BPE vocabularies.

Segment shard (``.seg``)::

    magic      8 bytes   b"SYNSEG\\x00\\x01"
    version    u32       1
    vocab_size u32       size of the id space the ids live in
    n          u64       number of segments
    offsets    u64[n+1]  start of each segment in the id payload (offsets[0] == 0)
    byte_lens  u32[n]    raw UTF-8 byte count represented by each segment
    ids        u32[offsets[n]]

BPE vocabulary (``.bpe``)::

    magic      8 bytes   b"SYNBPE\\x00\\x01"
    version    u32       1
    n_merges   u32
    merges     u32[n_merges, 2]   merge r creates token 256 + r

All integers are little-endian.
"""

import struct
from pathlib import Path

import numpy as np

from .corpus import BpeVocab, ByteSegment

SEG_MAGIC = b"SYNSEG\x00\x01"
BPE_MAGIC = b"SYNBPE\x00\x01"
VERSION = 1


class FormatError(ValueError):
    pass


def _check_magic(buf, magic, path):
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic header, not a {magic[:6].decode()} file")


def save_segments(path, segments, vocab_size):
    lens = np.array([len(s.ids) for s in segments], dtype="<u8")
    offsets = np.zeros(len(segments) + 1, dtype="<u8")
    np.cumsum(lens, out=offsets[1:])
    byte_lens = np.array([s.byte_len for s in segments], dtype="<u4")
    ids = (
        np.concatenate([np.asarray(s.ids) for s in segments]).astype("<u4")
        if segments
        else np.zeros(0, dtype="<u4")
    )
    with open(path, "wb") as fh:
        fh.write(SEG_MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, vocab_size, len(segments)))
        fh.write(offsets.tobytes())
        fh.write(byte_lens.tobytes())
        fh.write(ids.tobytes())


def load_segments(path):
    """Returns ``(segments, vocab_size)``."""
    buf = Path(path).read_bytes()
    _check_magic(buf, SEG_MAGIC, path)
    pos = len(SEG_MAGIC)
    version, vocab_size, n = struct.unpack_from("<IIQ", buf, pos)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported shard version {version}")
    pos += 16
    if len(buf) < pos + 12 * n + 8:
        raise FormatError(f"{path}: truncated shard")
    offsets = np.frombuffer(buf, dtype="<u8", count=n + 1, offset=pos)
    pos += 8 * (n + 1)
    byte_lens = np.frombuffer(buf, dtype="<u4", count=n, offset=pos)
    pos += 4 * n
    if len(buf) != pos + 4 * int(offsets[-1]):
        raise FormatError(f"{path}: shard size does not match its header")
    ids = np.frombuffer(buf, dtype="<u4", count=int(offsets[-1]), offset=pos).astype(np.int32)
    segments = [
        ByteSegment(ids[offsets[i] : offsets[i + 1]].copy(), int(byte_lens[i])) for i in range(n)
    ]
    return segments, vocab_size


def save_bpe(path, vocab):
    merges = np.array(vocab.merges, dtype="<u4").reshape(-1, 2)
    with open(path, "wb") as fh:
        fh.write(BPE_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(vocab.merges)))
        fh.write(merges.tobytes())


def load_bpe(path):
    buf = Path(path).read_bytes()
    _check_magic(buf, BPE_MAGIC, path)
    version, n = struct.unpack_from("<II", buf, len(BPE_MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported vocab version {version}")
    if len(buf) != len(BPE_MAGIC) + 8 + 8 * n:
        raise FormatError(f"{path}: vocab size does not match its header")
    merges = np.frombuffer(buf, dtype="<u4", count=2 * n, offset=len(BPE_MAGIC) + 8)
    return BpeVocab([tuple(m) for m in merges.reshape(-1, 2).tolist()])
