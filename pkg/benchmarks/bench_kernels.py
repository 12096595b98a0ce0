"""Time the numba and numpy kernel paths on layer-sized tensors.

    python3 benchmarks/bench_kernels.py [--batch 64] [--repeats 5]

Reports the best-of-N wall time for each kernel and backend, plus a full
training step of a two-layer model, and checks the two paths agree.
"""
import argparse
import time

import numpy as np

from pstgcn import kernels
from pstgcn.data import generate_synthetic
from pstgcn.descriptor import from_widths
from pstgcn.net import build_model
from pstgcn.optim import SGD
from pstgcn.training import train_step


def best_of(fn, repeats):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--channels", type=int, default=40)
    ap.add_argument("--frames", type=int, default=32)
    ap.add_argument("--joints", type=int, default=11)
    ap.add_argument("--K", type=int, default=9)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    N, C, T, V, K = args.batch, args.channels, args.frames, args.joints, args.K
    x = rng.standard_normal((N, C, T, V))
    w = rng.standard_normal((C, C, K, 1))
    dout = rng.standard_normal((N, C, T, V))
    z = rng.standard_normal((N, 3, C, T, V))
    G = rng.standard_normal((3, V, V))
    dmix = rng.standard_normal((N, C, T, V))

    ds = generate_synthetic(5, 20, T=T, seed=0)
    xb, yb = ds.x[:N], ds.labels[:N]

    cases = {
        "temporal conv forward": lambda: kernels.conv_forward(x, w, 1, K // 2),
        "temporal conv backward": lambda: kernels.conv_backward(dout, x, w, 1, K // 2),
        "graph mix forward": lambda: kernels.mix_forward(z, G),
        "graph mix backward": lambda: kernels.mix_backward(dmix, z, G),
    }
    backends = ["numpy"] + (["numba"] if kernels.HAS_NUMBA else [])
    results = {}
    outputs = {}
    for name in backends:
        kernels.set_backend(name)
        for case, fn in cases.items():
            results[case, name] = best_of(fn, args.repeats)
            outputs[case, name] = fn()
        model = build_model(from_widths((20, 40), 3, V, 5), ds.topology, 0)
        opt = SGD(model.named_parameters(), 0.01)
        results["train step (2 layers)", name] = best_of(lambda: train_step(model, xb, yb, opt), args.repeats)

    print(f"N={N} C={C} T={T} V={V} K={K}, best of {args.repeats}")
    print(f"{'kernel':26s}" + "".join(f"{b:>12s}" for b in backends))
    for case in list(cases) + ["train step (2 layers)"]:
        print(f"{case:26s}" + "".join(f"{results[case, b] * 1e3:10.2f}ms" for b in backends))
    if "numba" in backends:
        for case in cases:
            a, b = outputs[case, "numpy"], outputs[case, "numba"]
            a, b = (a if isinstance(a, tuple) else (a,)), (b if isinstance(b, tuple) else (b,))
            err = max(float(np.max(np.abs(p - q))) for p, q in zip(a, b))
            print(f"max |numpy - numba| {case}: {err:.2e}")


if __name__ == "__main__":
    main()
