"""Benchmark the compiled recurrence kernel against the NumPy fallback.

Times the GRU sequence forward and backward passes at training-relevant
shapes, plus a full model train step, for every available backend.

    python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from budbreak import kernels, models, training
from budbreak.data import build_labels


def time_call(fn, repeats: int) -> float:
    fn()  # warmup
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_kernel(B: int, H: int, h: int, repeats: int) -> dict[str, tuple[float, float]]:
    rng = np.random.default_rng(0)
    xg = rng.normal(size=(B, H, 3 * h))
    u = rng.normal(size=(3 * h, h)) / np.sqrt(h)
    b_hn = rng.normal(size=h)
    h0 = np.zeros((B, h))
    d_hs = rng.normal(size=(B, H, h))
    out = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        fwd = time_call(lambda: kernels.gru_sequence_forward(xg, u, b_hn, h0), repeats)
        hs, zs, rs, ms, ns = kernels.gru_sequence_forward(xg, u, b_hn, h0)
        bwd = time_call(
            lambda: kernels.gru_sequence_backward(u, b_hn, h0, hs, zs, rs, ms, ns, d_hs),
            repeats)
        out[name] = (fwd, bwd)
    return out


def bench_train_step(B: int, H: int, repeats: int) -> dict[str, float]:
    spec = models.ModelSpec("multi_head", input_dim=7, fc_dims=(64, 128, 64),
                            gru_hidden=128, num_cultivars=6)
    params = models.init_params(spec, seed=1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(B, H, 7))
    ids = np.arange(B) % 6
    labels = np.stack([build_labels(int(d), H)[0] for d in rng.integers(80, 140, size=B)])
    mask = np.ones((B, H))

    def step():
        from budbreak.nn import bce_loss
        probs, cache = models.forward_group(spec, params, x, ids)
        _, d_probs = bce_loss(probs, labels, mask)
        models.backward_group(spec, params, cache, d_probs)

    out = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        out[name] = time_call(step, repeats)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    initial = kernels.active_backend()
    print(f"backends: {kernels.available_backends()} (default {initial})\n")
    print("GRU sequence kernel, best of", args.repeats)
    print(f"{'shape (B,H,h)':<18}{'backend':<9}{'forward':>10}{'backward':>10}")
    try:
        for B, H, h in ((1, 365, 128), (12, 365, 128), (12, 365, 512)):
            for name, (fwd, bwd) in bench_kernel(B, H, h, args.repeats).items():
                print(f"{f'({B},{H},{h})':<18}{name:<9}{fwd * 1e3:>8.1f}ms{bwd * 1e3:>8.1f}ms")
        print("\nfull model forward+backward (fc 64/128/64, gru 128), best of", args.repeats)
        print(f"{'shape (B,H)':<18}{'backend':<9}{'step':>10}{'per season':>12}")
        for B, H in ((2, 365), (12, 365)):
            for name, step in bench_train_step(B, H, args.repeats).items():
                print(f"{f'({B},{H})':<18}{name:<9}{step * 1e3:>8.1f}ms"
                      f"{step / B * 1e3:>10.2f}ms")
    finally:
        kernels.set_backend(initial)


if __name__ == "__main__":
    main()
