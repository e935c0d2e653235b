"""Benchmark the fused LSTM kernels: numba @njit vs the pure-numpy path.

Run:  python benchmarks/bench_lstm.py

Shapes mirror training workloads (batch 64, hidden 32, feature width ~24,
sequence lengths from the window grid). The numpy fallback is what you get
with ATTRINET_NO_NUMBA=1.
"""

import time

import numpy as np

from attrinet import kernels as K

SHAPES = [
    (3, 64, 24, 32),    # obs = 1 month
    (7, 64, 24, 32),    # obs = 3 months
    (19, 64, 24, 32),   # obs = 9 months
    (19, 256, 24, 64),  # wide batch / hidden
]
INNER = 10
TRIALS = 8


def _best(fn):
    """Min over trials of the mean inner-loop time; the floor is the
    least-noisy estimate on a shared machine."""
    times = []
    for _ in range(TRIALS):
        t0 = time.perf_counter()
        for _ in range(INNER):
            fn()
        times.append((time.perf_counter() - t0) / INNER)
    return min(times) * 1e3


def main():
    if not K.USING_NUMBA:
        print("note: numba path unavailable (ATTRINET_NO_NUMBA set or numba missing);")
        print("timing the numpy path against itself.\n")
    nb_forward = getattr(K, "_lstm_forward_nb", K._lstm_forward_np)
    nb_backward = getattr(K, "_lstm_backward_nb", K._lstm_backward_np)
    print(f"{'T':>4} {'B':>5} {'F':>4} {'H':>4} "
          f"{'np fwd':>8} {'np bwd':>8} {'nb fwd':>8} {'nb bwd':>8} {'total':>7}")
    for T, B, F, H in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.normal(size=(T, B, F))
        wx = rng.normal(size=(F, 4 * H)) * 0.2
        wh = rng.normal(size=(H, 4 * H)) * 0.2
        b = np.zeros(4 * H)
        dh = rng.normal(size=(T, B, H))
        res = {}
        for name, fwd, bwd in (("np", K._lstm_forward_np, K._lstm_backward_np),
                               ("nb", nb_forward, nb_backward)):
            caches = fwd(x, wx, wh, b)
            bwd(x, wx, wh, *caches, dh)  # warm-up / JIT compile
            res[name + "_f"] = _best(lambda: fwd(x, wx, wh, b))
            res[name + "_b"] = _best(lambda: bwd(x, wx, wh, *caches, dh))
        speedup = (res["np_f"] + res["np_b"]) / (res["nb_f"] + res["nb_b"])
        print(f"{T:>4} {B:>5} {F:>4} {H:>4} "
              f"{res['np_f']:>7.2f} {res['np_b']:>7.2f} "
              f"{res['nb_f']:>7.2f} {res['nb_b']:>7.2f} {speedup:>6.2f}x")
    print("\ntimes in ms; 'total' is the numpy/numba ratio over one "
          "forward+backward pass.")


if __name__ == "__main__":
    main()
