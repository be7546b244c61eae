"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size large|desk]

Both paths are checked for identical output before timing. The first numba
call (JIT compile or cache load) is excluded.
"""

import argparse
import timeit

import numpy as np

from nmsparse import _kernels as K

SIZES = {
    # one FF weight matrix of the desk model and of the 1024/4096 model
    "desk": (64, 256),
    "large": (1024, 4096),
}


def bench(label, fn_numpy, fn_numba, args, repeat):
    a, b = fn_numpy(*args), fn_numba(*args)
    assert np.array_equal(a, b), f"{label}: numba and numpy disagree"
    t_np = min(timeit.repeat(lambda: fn_numpy(*args), number=1, repeat=repeat))
    t_nb = min(timeit.repeat(lambda: fn_numba(*args), number=1, repeat=repeat))
    print(f"{label:<28}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>10.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", choices=sorted(SIZES), default="large")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    rows, cols = SIZES[args.size]
    print(f"weight {rows}x{cols}, best of {args.repeat}")
    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>11}")
    for n, m in ((2, 4), (1, 16), (8, 16)):
        groups = rng.standard_normal((rows * cols // m, m))
        bench(f"top-{n} of {m} per group", K.topn_groups_numpy, K.topn_groups_numba, (groups, n), args.repeat)
    for width in (2, 4):
        count = rows * cols // 4
        values = rng.integers(0, 2**width, size=count)
        bench(f"pack {count} x {width} bits", K.pack_bits_numpy, K.pack_bits_numba, (values, width), args.repeat)
        stream = K.pack_bits_numpy(values, width)
        bench(
            f"unpack {count} x {width} bits",
            K.unpack_bits_numpy,
            K.unpack_bits_numba,
            (stream, width, count),
            args.repeat,
        )


if __name__ == "__main__":
    main()
