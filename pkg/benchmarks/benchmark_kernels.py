"""Timing comparison of the conv2d kernels: compiled backend vs pure numpy.

Run from the repository root:

    python3 benchmarks/benchmark_kernels.py

The compiled path is what REID_FORGE_BACKEND=numba (the default when numba
is importable) dispatches to; the numpy path is the fallback used when the
environment variable selects it or numba is missing. Both are timed on the
same inputs, after a warmup call so JIT compilation is not billed to the
compiled path.
"""

import time

import numpy as np

from reid_forge import kernels

SHAPES = [
    # batch, c_in, h, w, c_out, kernel, stride
    (8, 3, 32, 32, 16, 3, 2),
    (8, 16, 16, 16, 32, 3, 2),
    (24, 3, 64, 64, 16, 3, 2),
    (24, 16, 32, 32, 32, 3, 2),
    (4, 32, 32, 32, 32, 3, 1),
]

REPEATS = 5


def time_call(fn, *args) -> float:
    fn(*args)  # warmup; first numba call compiles
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    if not kernels._HAVE_NUMBA:
        print("numba is not importable; only the numpy path can run")
    rng = np.random.default_rng(0)
    header = (
        f"{'shape (b,ci,h,w,co,k,s)':>28s}  {'dir':>8s}  "
        f"{'numpy':>10s}  {'numba':>10s}  {'speedup':>8s}"
    )
    print(header)
    print("-" * len(header))
    for b, ci, h, w, co, k, s in SHAPES:
        pad = k // 2
        x = rng.standard_normal((b, ci, h, w))
        weight = rng.standard_normal((co, ci, k, k))
        bias = rng.standard_normal(co)
        label = f"({b},{ci},{h},{w},{co},{k},{s})"

        t_np = time_call(kernels.conv2d_forward_numpy, x, weight, bias, s, pad)
        row = [t_np]
        if kernels._HAVE_NUMBA:
            row.append(time_call(kernels.conv2d_forward_numba, x, weight, bias, s, pad))
        _report(label, "forward", row)

        out = kernels.conv2d_forward_numpy(x, weight, bias, s, pad)
        grad = rng.standard_normal(out.shape)
        t_np = time_call(kernels.conv2d_backward_numpy, x, weight, grad, s, pad)
        row = [t_np]
        if kernels._HAVE_NUMBA:
            row.append(time_call(kernels.conv2d_backward_numba, x, weight, grad, s, pad))
        _report(label, "backward", row)


def _report(label: str, direction: str, times: list[float]) -> None:
    t_np = times[0]
    if len(times) == 2:
        t_nb = times[1]
        print(
            f"{label:>28s}  {direction:>8s}  {t_np * 1e3:9.2f}ms  "
            f"{t_nb * 1e3:9.2f}ms  {t_np / t_nb:7.1f}x"
        )
    else:
        print(f"{label:>28s}  {direction:>8s}  {t_np * 1e3:9.2f}ms  {'-':>10s}  {'-':>8s}")


if __name__ == "__main__":
    main()
