"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best time for each backend and the
speedup. Without the compiled extension only the Python column is shown.
"""
import argparse
import random
import timeit

from pelletflow import kernels

SCALE = kernels.SCALE


def cases(mod):
    rng = random.Random(0)
    keys = [rng.randbytes(16) for _ in range(20_000)]

    def hash_keys():
        for k in keys:
            mod.key_hash_index(k, 7)

    def buckets():
        mod.bucket_counts(keys, 8)

    def walk():
        mod.workload_series(2, 4 * SCALE, 300, 60, 0, 5 * SCALE, SCALE // 5, 1, 100_000)

    def spiky():
        mod.workload_series(1, 4 * SCALE, 300, 60, int(0.02 * (1 << 53)), 5 * SCALE, SCALE, 1, 100_000)

    n = 5
    lat = [0.05, 1.25, 0.2, 0.5, 0.8]

    def ticks():
        queues, credits, outcarry = [0] * n, [0] * n, [0] * n
        cores = [2] * n
        inst = [SCALE * SCALE // int(l * SCALE) for l in lat]
        sel = [SCALE] * n
        arrivals, processed = [0] * n, [0] * n
        for t in range(20_000):
            mod.pipeline_tick(queues, credits, outcarry, cores, inst, sel, 4, 4 + t % 3, arrivals, processed)

    return {"key_hash_index x20k": hash_keys, "bucket_counts x20k": buckets,
            "workload random_walk 100k": walk, "workload periodic_spiky 100k": spiky,
            "pipeline_tick x20k (5 stages)": ticks}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    found = kernels.backends()
    names = [b for b in ("python", "cython") if b in found]
    results = {b: {k: min(timeit.repeat(fn, number=1, repeat=args.repeat)) for k, fn in cases(found[b]).items()}
               for b in names}
    print(f"{'kernel':32s}" + "".join(f"{b:>12s}" for b in names) + ("     speedup" if len(names) == 2 else ""))
    for k in results[names[0]]:
        row = f"{k:32s}" + "".join(f"{results[b][k] * 1e3:10.2f}ms" for b in names)
        if len(names) == 2:
            row += f"{results['python'][k] / results['cython'][k]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
