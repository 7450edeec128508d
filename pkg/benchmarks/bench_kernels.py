"""Compare the numba and pure-numpy byte kernels.

    python benchmarks/bench_kernels.py [--bytes 200000] [--repeat 5]

Both variants are imported side by side, so the ``SYNERGY_DISABLE_NUMBA`` flag
does not matter here. The first jit call (compilation) is excluded from timing.
"""

import argparse
import time

import numpy as np

from synergy import kernels
from synergy.sample_text import python_docs_text


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def merge_loop(merge_pair, count_pairs, ids, n_merges):
    """BPE training inner loop: count pairs, merge the most frequent, repeat."""
    ids = ids.copy()
    for r in range(n_merges):
        counts = count_pairs(ids, 256 + n_merges)
        flat = int(np.argmax(counts))
        a, b = divmod(flat, counts.shape[1])
        ids = merge_pair(ids, np.int32(a), np.int32(b), np.int32(256 + r))
    return ids


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bytes", type=int, default=200_000, help="size of the text sample")
    ap.add_argument("--merges", type=int, default=32, help="merges in the BPE training loop")
    ap.add_argument("--repeat", type=int, default=5, help="timing repeats (best is reported)")
    args = ap.parse_args()

    data = np.frombuffer(python_docs_text(args.bytes).encode("utf-8"), dtype=np.uint8)
    ids = data.astype(np.int32)
    ws = kernels._WHITESPACE

    cases = {
        "count_pairs": (lambda: kernels.count_pairs_jit(ids, 256), lambda: kernels.count_pairs_np(ids, 256)),
        "merge_pair": (
            lambda: kernels.merge_pair_jit(ids, np.int32(101), np.int32(32), np.int32(256)),
            lambda: kernels.merge_pair_np(ids, np.int32(101), np.int32(32), np.int32(256)),
        ),
        "clip_spans": (
            lambda: kernels.clip_spans_jit(data, 254, True, ws),
            lambda: kernels.clip_spans_np(data, 254, True, ws),
        ),
        f"bpe_train_{args.merges}": (
            lambda: merge_loop(kernels.merge_pair_jit, kernels.count_pairs_jit, ids, args.merges),
            lambda: merge_loop(kernels.merge_pair_np, kernels.count_pairs_np, ids, args.merges),
        ),
    }
    print(f"{len(data)} bytes, best of {args.repeat}")
    print(f"{'kernel':<16}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (jit, ref) in cases.items():
        jit()  # compile
        a, b = best_of(jit, args.repeat), best_of(ref, args.repeat)
        print(f"{name:<16}{a * 1e3:>12.2f}{b * 1e3:>12.2f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
