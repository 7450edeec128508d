"""Byte tokenization, segment clipping, corpus splitting, batching and the BPE baseline tokenizer."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kernels

N_BYTES = 256


@dataclass(frozen=True)
class SpecialTokens:
    bos: int = 256
    eos: int = 257
    pad: int = 258

    def __post_init__(self):
        ids = (self.bos, self.eos, self.pad)
        if min(ids) < N_BYTES or len(set(ids)) != 3:
            raise ValueError(f"special token ids must be distinct and >= 256, got {ids}")

    @classmethod
    def after(cls, base_vocab: int) -> "SpecialTokens":
        """Specials placed right after a base vocabulary of ``base_vocab`` ids."""
        return cls(base_vocab, base_vocab + 1, base_vocab + 2)

    @property
    def vocab_size(self) -> int:
        return max(self.bos, self.eos, self.pad) + 1

    def __contains__(self, token_id) -> bool:
        return token_id in (self.bos, self.eos, self.pad)


BYTE_SPECIALS = SpecialTokens()
BYTE_VOCAB_SIZE = BYTE_SPECIALS.vocab_size  # 259


@dataclass
class ByteSegment:
    """A clipped sample. ``ids`` excludes bos/eos; ``byte_len`` counts raw UTF-8 bytes."""

    ids: np.ndarray
    byte_len: int

    def __len__(self):
        return len(self.ids)

    def raw_bytes(self) -> bytes:
        ids = np.asarray(self.ids)
        if ids.size and ids.max() >= N_BYTES:
            raise ValueError("segment holds non-byte ids; decode it with its tokenizer")
        return ids.astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# UTF-8 byte tokenizer


def utf8_tokenize(text) -> np.ndarray:
    """Token ids of ``text`` are exactly its UTF-8 byte values.

    ``bytes`` input is validated as UTF-8 and raises ``UnicodeDecodeError`` otherwise.
    """
    if isinstance(text, (bytes, bytearray, memoryview)):
        data = bytes(text)
        data.decode("utf-8")
    else:
        data = text.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def utf8_detokenize(ids, specials: SpecialTokens = BYTE_SPECIALS, errors: str = "strict") -> str:
    ids = [int(i) for i in ids if int(i) not in specials]
    return bytes(ids).decode("utf-8", errors=errors)


# ---------------------------------------------------------------------------
# segment clipping


def clip_byte_spans(data: bytes, max_bytes: int, utf8: bool = True) -> list[tuple[int, int]]:
    """Byte spans ``[start, end)`` of the segments of ``data``; see :func:`clip_segments`."""
    if max_bytes < 3:
        raise ValueError(f"max_bytes must be >= 3, got {max_bytes}")
    arr = np.frombuffer(data, dtype=np.uint8)
    if arr.size == 0:
        return []
    starts, ends = kernels.clip_spans(arr, max_bytes - 2, utf8, kernels._WHITESPACE)
    if utf8 and max_bytes < 6:
        # a budget under 4 bytes cannot always hold a whole codepoint
        inner = ends[ends < arr.size]
        if np.any((arr[inner] & 0xC0) == 0x80):
            raise ValueError(f"a codepoint is longer than the {max_bytes - 2}-byte budget")
    return list(zip(starts.tolist(), ends.tolist()))


def clip_byte_segments(data: bytes, max_bytes: int, utf8: bool = True) -> list[ByteSegment]:
    """Clip raw bytes; with ``utf8=False`` the codepoint rule is dropped (for binary data)."""
    arr = np.frombuffer(data, dtype=np.uint8)
    return [
        ByteSegment(arr[s:e].astype(np.int32), e - s)
        for s, e in clip_byte_spans(data, max_bytes, utf8)
    ]


def clip_segments(text: str, max_bytes: int) -> list[ByteSegment]:
    """Split ``text`` into independent segments that fit a ``max_bytes`` context with bos/eos.

    Each segment holds at most ``max_bytes - 2`` bytes. A split prefers the last
    ASCII whitespace byte inside the window (that byte is consumed and belongs to
    neither side) and otherwise falls back to the last codepoint boundary.
    ``max_bytes >= 6`` always succeeds; smaller budgets raise ``ValueError`` when a
    codepoint does not fit.
    """
    return clip_byte_segments(text.encode("utf-8"), max_bytes, utf8=True)


# ---------------------------------------------------------------------------
# corpus splitting and ingestion


def split_sizes(n_rows: int, train_fraction: float) -> tuple[int, int, int]:
    """``floor(n * fraction)`` train rows; the remainder goes to eval/test, eval taking the odd one."""
    n_train = math.floor(n_rows * train_fraction + 1e-9)
    rest = n_rows - n_train
    n_eval = (rest + 1) // 2
    return n_train, n_eval, rest - n_eval


def split_corpus(rows: Sequence, train_fraction: float = 0.7, seed: int = 0):
    """Random disjoint train/eval/test partition of ``rows``, reproducible per seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rows = list(rows)
    if not rows:
        raise ValueError("cannot split an empty corpus")
    n_train, n_eval, _ = split_sizes(len(rows), train_fraction)
    order = np.random.default_rng(seed).permutation(len(rows))
    picked = [rows[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_eval], picked[n_train + n_eval :]


def read_documents(path) -> list[str]:
    """Documents from a ``.jsonl`` file (one ``text`` field per line) or a plain-text file.

    Plain text is split into documents on blank lines.
    """
    path = Path(path)
    if path.suffix == ".jsonl":
        docs = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    docs.append(json.loads(line)["text"])
                except (KeyError, json.JSONDecodeError) as exc:
                    raise ValueError(f"{path}:{lineno}: expected a JSON object with a 'text' field") from exc
        return docs
    text = path.read_text(encoding="utf-8")
    return [d.strip("\n") for d in text.split("\n\n") if d.strip()]


def segment_documents(docs: Sequence[str], context_length: int) -> list[ByteSegment]:
    out = []
    for doc in docs:
        out.extend(clip_segments(doc, context_length))
    return out


# ---------------------------------------------------------------------------
# batching


def make_batch(
    segments: Sequence[ByteSegment],
    batch_size: int,
    context_length: int,
    specials: SpecialTokens = BYTE_SPECIALS,
) -> tuple[np.ndarray, np.ndarray]:
    """Frame segments as ``bos ids eos pad...`` rows.

    Returns ``(ids, loss_mask)`` of shape ``(batch_size, context_length)``.
    ``loss_mask[r, i]`` is 1 when the target ``ids[r, i + 1]`` is a real token or
    eos. Missing rows (fewer segments than ``batch_size``) are all padding.
    """
    if len(segments) == 0:
        raise ValueError("empty batch")
    if len(segments) > batch_size:
        raise ValueError(f"{len(segments)} segments do not fit batch_size={batch_size}")
    ids = np.full((batch_size, context_length), specials.pad, dtype=np.int64)
    mask = np.zeros((batch_size, context_length), dtype=np.float32)
    for r, seg in enumerate(segments):
        n = len(seg.ids)
        if n + 2 > context_length:
            raise ValueError(f"segment of {n} tokens does not fit context_length={context_length}")
        ids[r, 0] = specials.bos
        ids[r, 1 : n + 1] = seg.ids
        ids[r, n + 1] = specials.eos
        mask[r, : n + 1] = 1.0
    return ids, mask


def iter_batches(
    segments: Sequence[ByteSegment],
    batch_size: int,
    context_length: int,
    rng: np.random.Generator | None = None,
    specials: SpecialTokens = BYTE_SPECIALS,
    drop_last: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[ByteSegment]]]:
    """One pass over ``segments``, shuffled when ``rng`` is given."""
    order = np.arange(len(segments)) if rng is None else rng.permutation(len(segments))
    for lo in range(0, len(order), batch_size):
        chunk = [segments[i] for i in order[lo : lo + batch_size]]
        if drop_last and len(chunk) < batch_size:
            break
        ids, mask = make_batch(chunk, len(chunk), context_length, specials)
        yield ids, mask, chunk


# ---------------------------------------------------------------------------
# byte-level BPE (baseline tokenizer)


@dataclass
class BpeVocab:
    """Ordered merge list; merge ``r`` defines token ``256 + r``."""

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.merges = [(int(a), int(b)) for a, b in self.merges]
        self.token_bytes = {i: bytes([i]) for i in range(N_BYTES)}
        for rank, (a, b) in enumerate(self.merges):
            new = N_BYTES + rank
            if a not in self.token_bytes or b not in self.token_bytes:
                raise ValueError(f"merge {rank} ({a}, {b}) references an undefined token")
            self.token_bytes[new] = self.token_bytes[a] + self.token_bytes[b]

    @property
    def size(self) -> int:
        """Number of non-special tokens."""
        return N_BYTES + len(self.merges)

    @property
    def specials(self) -> SpecialTokens:
        return SpecialTokens.after(self.size)

    @property
    def vocab_size(self) -> int:
        return self.specials.vocab_size


def _as_sequences(corpus) -> list[bytes]:
    if isinstance(corpus, str):
        return [corpus.encode("utf-8")]
    if isinstance(corpus, (bytes, bytearray, memoryview)):
        return [bytes(corpus)]
    return [c.encode("utf-8") if isinstance(c, str) else bytes(c) for c in corpus]


def bpe_train(corpus_bytes, vocab_size: int) -> BpeVocab:
    """Greedy BPE: ``vocab_size - 256`` merges of the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair. ``corpus_bytes`` may be a
    byte string or a list of documents; pairs never straddle documents.
    Training stops early if no pair occurs any more.
    """
    if vocab_size <= N_BYTES:
        raise ValueError(f"vocab_size must exceed 256, got {vocab_size}")
    seqs = _as_sequences(corpus_bytes)
    if sum(len(s) for s in seqs) < 2:
        raise ValueError("BPE training needs at least 2 bytes of corpus")
    parts = []
    for s in seqs:
        parts.append(np.frombuffer(s, dtype=np.uint8).astype(np.int32))
        parts.append(np.array([kernels.SEP], dtype=np.int32))
    ids = np.concatenate(parts)
    merges = []
    for rank in range(vocab_size - N_BYTES):
        current = N_BYTES + rank
        counts = kernels.count_pairs(ids, current)
        best = int(np.argmax(counts))  # first maximum in row-major order == smallest pair
        a, b = divmod(best, current)
        if counts[a, b] == 0:
            break
        merges.append((a, b))
        ids = kernels.merge_pair(ids, np.int32(a), np.int32(b), np.int32(current))
    return BpeVocab(merges)


def bpe_encode(text, vocab: BpeVocab) -> np.ndarray:
    data = text if isinstance(text, (bytes, bytearray)) else text.encode("utf-8")
    ids = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int32)
    return kernels.apply_merges(ids, vocab.merges)


def bpe_decode(ids, vocab: BpeVocab) -> bytes:
    specials = vocab.specials
    return b"".join(vocab.token_bytes[int(i)] for i in ids if int(i) not in specials)


def bpe_segments(segments: Sequence[ByteSegment], vocab: BpeVocab) -> list[ByteSegment]:
    """Re-tokenize byte segments with BPE; ``byte_len`` is carried over unchanged."""
    return [ByteSegment(bpe_encode(seg.raw_bytes(), vocab), seg.byte_len) for seg in segments]


def fit_both_contexts(
    segments: Sequence[ByteSegment], vocab: BpeVocab, max_tokens: int
) -> list[ByteSegment]:
    """Split byte segments further until their BPE encoding also fits ``max_tokens``.

    Keeps the byte model and the BPE baseline training on identical text pieces.
    """
    out = []
    stack = list(reversed(segments))
    while stack:
        seg = stack.pop()
        if len(bpe_encode(seg.raw_bytes(), vocab)) + 2 <= max_tokens:
            out.append(seg)
            continue
        raw = seg.raw_bytes()
        half = max(8, len(raw) // 2 + 2)
        pieces = clip_byte_segments(raw, half, utf8=True)
        stack.extend(reversed(pieces))
    return out
