"""Time the numpy and numba field kernels on a training-sized batch.

    python benchmarks/bench_kernels.py [--batch 256] [--n 2] [--repeat 200]

Also times one full training epoch (forward + discretize backward) per backend
and reports the max difference between the two backends' outputs.
"""
import argparse
import time

import numpy as np

from sphereflow import kernels
from sphereflow.density import benchmark_mixture
from sphereflow.geometry import sample_uniform
from sphereflow.net import default_layer_sizes, random_net
from sphereflow.trainer import TrainConfig, loss_and_grad


def best_of(fn, repeat):
    fn()  # warm-up (jit compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()

    sizes = default_layer_sizes(args.n)
    net = random_net(sizes, seed=0, scale=0.5)
    rng = np.random.default_rng(0)
    Q = sample_uniform(rng, args.batch, args.n)
    gX = rng.standard_normal(Q.shape)
    gD = rng.standard_normal(args.batch)
    cfg = TrainConfig(n=args.n)
    target = benchmark_mixture(args.n + 1)

    outputs = {}
    print(f"batch {args.batch}, S^{args.n}, layer sizes {sizes}")
    print(f"{'backend':<8} {'kernel':<14} {'best':>10} {'median':>10}")
    for name in ("numpy", "numba"):
        with kernels.use_backend(name):
            fwd = lambda: kernels.field_div(sizes, net.theta, 0.3, Q)
            bwd = lambda: kernels.field_div_vjp(sizes, net.theta, 0.3, Q, gX, gD)
            epoch = lambda: loss_and_grad(net, target, args.batch, cfg, np.random.default_rng(1))
            for label, fn, rep in (("field_div", fwd, args.repeat), ("field_div_vjp", bwd, args.repeat),
                                   ("train epoch", epoch, args.epochs)):
                best, med = best_of(fn, rep)
                print(f"{name:<8} {label:<14} {best * 1e3:>8.3f}ms {med * 1e3:>8.3f}ms")
            outputs[name] = bwd()
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outputs["numpy"], outputs["numba"]))
    print(f"max |numpy - numba| over outputs: {diff:.2e}")


if __name__ == "__main__":
    main()
