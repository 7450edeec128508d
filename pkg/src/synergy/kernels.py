"""Hot loops of the byte pipeline: BPE pair counting, pair merging, segment clipping.

Each kernel has a numba implementation (``*_jit``) and a vectorised numpy
implementation (``*_np``). The public names are bound to one of the two at
import time according to :data:`synergy._accel.USE_NUMBA`. Both variants are
importable so tests and ``benchmarks/bench_kernels.py`` can compare them.

Token sequences are ``int32`` arrays; ``-1`` marks a document boundary that no
pair may straddle.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

SEP = -1

_WHITESPACE = np.zeros(256, dtype=np.bool_)
_WHITESPACE[[9, 10, 11, 12, 13, 32]] = True


# ---------------------------------------------------------------------------
# pair counting


@njit
def count_pairs_jit(ids, vocab_size):
    counts = np.zeros((vocab_size, vocab_size), dtype=np.int64)
    for i in range(ids.shape[0] - 1):
        a = ids[i]
        b = ids[i + 1]
        if a >= 0 and b >= 0:
            counts[a, b] += 1
    return counts


def count_pairs_np(ids, vocab_size):
    a = ids[:-1].astype(np.int64)
    b = ids[1:].astype(np.int64)
    ok = (a >= 0) & (b >= 0)
    codes = a[ok] * vocab_size + b[ok]
    flat = np.bincount(codes, minlength=vocab_size * vocab_size)
    return flat.reshape(vocab_size, vocab_size)


# ---------------------------------------------------------------------------
# pair merging (left-to-right, non-overlapping)


@njit
def merge_pair_jit(ids, a, b, new_id):
    out = np.empty_like(ids)
    n = ids.shape[0]
    i = 0
    j = 0
    while i < n:
        if i + 1 < n and ids[i] == a and ids[i + 1] == b:
            out[j] = new_id
            i += 2
        else:
            out[j] = ids[i]
            i += 1
        j += 1
    return out[:j].copy()


def merge_pair_np(ids, a, b, new_id):
    if ids.shape[0] < 2:
        return ids.copy()
    hits = np.flatnonzero((ids[:-1] == a) & (ids[1:] == b))
    if hits.size == 0:
        return ids.copy()
    if a == b and hits.size > 1:
        # runs like "aaa" produce adjacent hits; keep every other hit from the run start
        new_run = np.empty(hits.size, dtype=np.bool_)
        new_run[0] = True
        new_run[1:] = np.diff(hits) != 1
        run_start = np.maximum.accumulate(np.where(new_run, np.arange(hits.size), 0))
        hits = hits[(np.arange(hits.size) - run_start) % 2 == 0]
    out = ids.copy()
    out[hits] = new_id
    keep = np.ones(ids.shape[0], dtype=np.bool_)
    keep[hits + 1] = False
    return out[keep]


# ---------------------------------------------------------------------------
# segment clipping


@njit
def clip_spans_jit(data, budget, utf8, whitespace):
    n = data.shape[0]
    starts = np.empty(n + 1, dtype=np.int64)
    ends = np.empty(n + 1, dtype=np.int64)
    count = 0
    pos = 0
    while pos < n:
        if n - pos <= budget:
            starts[count] = pos
            ends[count] = n
            count += 1
            break
        limit = pos + budget
        cut = -1
        s = limit
        while s > pos:
            if whitespace[data[s]]:
                cut = s
                break
            s -= 1
        if cut > 0:
            starts[count] = pos
            ends[count] = cut
            count += 1
            pos = cut + 1
            continue
        cut = limit
        if utf8:
            while cut > pos + 1 and (data[cut] & 0xC0) == 0x80:
                cut -= 1
        starts[count] = pos
        ends[count] = cut
        count += 1
        pos = cut
    return starts[:count].copy(), ends[:count].copy()


def clip_spans_np(data, budget, utf8, whitespace):
    n = data.shape[0]
    ws_pos = np.flatnonzero(whitespace[data])
    if utf8:
        boundary_pos = np.flatnonzero((data & 0xC0) != 0x80)
    starts = []
    ends = []
    pos = 0
    while pos < n:
        if n - pos <= budget:
            starts.append(pos)
            ends.append(n)
            break
        limit = pos + budget
        # last whitespace in (pos, limit]
        idx = np.searchsorted(ws_pos, limit, side="right") - 1
        if idx >= 0 and ws_pos[idx] > pos:
            cut = int(ws_pos[idx])
            starts.append(pos)
            ends.append(cut)
            pos = cut + 1
            continue
        cut = limit
        if utf8:
            idx = np.searchsorted(boundary_pos, limit, side="right") - 1
            if idx >= 0 and boundary_pos[idx] > pos:
                cut = int(boundary_pos[idx])
            else:
                cut = pos + 1
        starts.append(pos)
        ends.append(cut)
        pos = cut
    return np.asarray(starts, dtype=np.int64), np.asarray(ends, dtype=np.int64)


if USE_NUMBA:
    count_pairs = count_pairs_jit
    merge_pair = merge_pair_jit
    clip_spans = clip_spans_jit
else:
    count_pairs = count_pairs_np
    merge_pair = merge_pair_np
    clip_spans = clip_spans_np


def apply_merges(ids, merges, first_id=256):
    """Apply an ordered merge list; merge ``r`` creates token ``first_id + r``."""
    out = np.ascontiguousarray(ids, dtype=np.int32)
    for rank, (a, b) in enumerate(merges):
        if out.shape[0] < 2:
            break
        out = merge_pair(out, np.int32(a), np.int32(b), np.int32(first_id + rank))
    return out
