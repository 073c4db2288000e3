"""Benchmark the geometry kernels: numba loops vs numpy fallbacks.

    python benchmarks/bench_kernels.py [--boxes 40 200 1000] [--n-s 128]
"""
import argparse
import time

import numpy as np

from rcqlpack import kernels
from rcqlpack.data import generate_dataset
from rcqlpack.env import reset, step
from rcqlpack.geometry import BinSpec, slot_coords
from rcqlpack.heuristics import heuristic


def timeit(fn, *args, n_warmup=2, n_iter=20):
    for _ in range(n_warmup):
        fn(*args)
    t0 = time.perf_counter()
    for _ in range(n_iter):
        fn(*args)
    return (time.perf_counter() - t0) / n_iter * 1000


def packed_history(n_boxes, n_s, seed=0):
    b = BinSpec(10.0, 10.0, n_s, 3)
    inst = generate_dataset(1, n_boxes, "hard", b, seed=seed)[0]
    st = reset(inst.boxes, b, "offline", n_u=n_boxes)
    for a in heuristic(inst.boxes, b, "offline"):
        step(st, a)
    return st


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--boxes", type=int, nargs="+", default=[40, 200, 1000])
    ap.add_argument("--n-s", type=int, default=128)
    args = ap.parse_args()
    if kernels.NUMBA is None:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':16s} {'boxes':>6s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for n in args.boxes:
        st = packed_history(n, args.n_s)
        h = st.history()
        cx = slot_coords(10.0, args.n_s)
        hm = np.random.default_rng(0).random((args.n_s, args.n_s))
        cases = {
            "drop_height": (*h, 3.3, 4.4, 1.5, 1.2),
            "drop_map": (*h, cx, cx, 1.5, 1.2),
            "count_violations": (*h, 10.0, 10.0, 1e-9),
            "window_max": (hm, 12, 9),
        }
        for name, a in cases.items():
            t_np = timeit(getattr(kernels.NUMPY, name), *a)
            t_nb = timeit(getattr(kernels.NUMBA, name), *a)
            r_np = getattr(kernels.NUMPY, name)(*a)
            r_nb = getattr(kernels.NUMBA, name)(*a)
            ok = np.allclose(np.asarray(r_np, dtype=float), np.asarray(r_nb, dtype=float))
            flag = "" if ok else "  MISMATCH"
            print(f"{name:16s} {n:6d} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x{flag}")


if __name__ == "__main__":
    main()
