"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 5]

Both backends are called directly, so CASCADESEG_NUMBA does not matter here.
The conv rows cover the layer shapes of the tiny preset; the last column shows
which backend numba mode dispatches that shape to. JIT compilation is done
before timing.
"""
import argparse
import time

import numpy as np

from cascadeseg import _kernels as K

# (in channels, out channels, grid edge, stride, kernel edge)
CONV_SHAPES = [
    (4, 4, 16, 1, 3), (4, 8, 16, 2, 3), (8, 8, 8, 1, 3), (8, 16, 8, 2, 3), (16, 16, 4, 1, 3),
    (16, 32, 4, 2, 3), (32, 32, 2, 1, 3), (32, 16, 4, 1, 1), (8, 4, 16, 1, 1), (4, 3, 16, 1, 1),
]


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def conv_rows(rng, repeats):
    for cin, cout, d, s, k in CONV_SHAPES:
        p = k // 2
        xp = rng.normal(size=(1, cin, d + 2 * p, d + 2 * p, d + 2 * p)).astype(np.float32)
        w = rng.normal(size=(cout, cin, k, k, k)).astype(np.float32)
        od = (d + 2 * p - k) // s + 1
        g = rng.normal(size=(1, cout, od, od, od)).astype(np.float32)
        st, ks = (s,) * 3, (k,) * 3
        pairs = [
            (lambda: K.conv3d_forward_numpy(xp, w, st), lambda: K.conv3d_forward_numba(xp, w, st)),
            (lambda: K.conv3d_grad_weight_numpy(xp, g, ks, st), lambda: K.conv3d_grad_weight_numba(xp, g, ks, st)),
            (lambda: K.conv3d_grad_input_numpy(g, w, xp.shape, st), lambda: K.conv3d_grad_input_numba(g, w, xp.shape, st)),
        ]
        t_np = sum(best_of(a, repeats) for a, _ in pairs)
        t_nb = sum(best_of(b, repeats) for _, b in pairs)
        diff = max(float(np.max(np.abs(a() - b()))) for a, b in pairs)
        picked = "numba" if K.numba_fits_conv(cin, cout, ks, st) else "numpy"
        yield f"conv {cin}->{cout} {d}^3 s{s} k{k}", t_np, t_nb, diff, picked


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print("conv times are forward + both gradients")
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}  dispatch")
    for name, t_np, t_nb, diff, picked in conv_rows(rng, args.repeats):
        print(f"{name:<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x{diff:>12.1e}  {picked}")
    src = rng.uniform(0, 32, size=(2000, 3))
    dst = rng.uniform(0, 32, size=(3000, 3))
    t_np = best_of(lambda: K.min_sq_dist_numpy(src, dst), args.repeats)
    t_nb = best_of(lambda: K.min_sq_dist_numba(src, dst), args.repeats)
    diff = float(np.max(np.abs(K.min_sq_dist_numpy(src, dst) - K.min_sq_dist_numba(src, dst))))
    print(f"{'min sq dist 2000x3000':<26}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x{diff:>12.1e}  numba")


if __name__ == "__main__":
    main()
