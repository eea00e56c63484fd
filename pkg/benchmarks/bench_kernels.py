"""Time each kernel on the numba and numpy backends and check they agree bitwise.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--out kernels.csv]

Also times one toy-preset forward pass end to end under each backend.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from assocdetr import kernels
from assocdetr.autodiff.tensor import Tensor, no_grad
from assocdetr.pipeline import DetectionEncoder, PipelineConfig


def cases(rng):
    xp = rng.standard_normal((2, 32, 34, 34))
    w = rng.standard_normal((32, 32, 3, 3))
    wg = rng.standard_normal((32, 1, 3, 3))
    cols = rng.standard_normal((2, 32 * 9, 32 * 32))
    pool_g = rng.standard_normal((2, 32, 16, 16))
    _, arg = kernels._BACKENDS["numpy"].maxpool_forward(xp, 3, 3, 2)
    return {
        "conv2d_forward": lambda k: k.conv2d_forward(xp, w, 1, 1),
        "conv2d_forward[depthwise]": lambda k: k.conv2d_forward(xp, wg, 1, 32),
        "im2col": lambda k: k.im2col(xp, 3, 3, 1),
        "col2im": lambda k: k.col2im(cols, xp.shape, 3, 3, 1),
        "maxpool_forward": lambda k: k.maxpool_forward(xp, 3, 3, 2),
        "maxpool_backward": lambda k: k.maxpool_backward(pool_g, arg, xp.shape),
        "avgpool_forward": lambda k: k.avgpool_forward(xp, 3, 3, 2),
        "avgpool_backward": lambda k: k.avgpool_backward(pool_g, xp.shape, 3, 3, 2),
    }


def median_time(fn, repeats):
    fn()  # warm-up, also triggers jit compilation
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return a.shape == b.shape and np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "numba" not in backends:
        print("numba is not importable; only the numpy backend can be timed", file=sys.stderr)
    rows = ["kernel," + ",".join(f"{b}_seconds" for b in backends) + ",speedup,bitwise_equal"]
    mismatched = []
    for name, fn in cases(np.random.default_rng(0)).items():
        results, secs = {}, {}
        for b in backends:
            mod = kernels._BACKENDS[b]
            results[b] = fn(mod)
            secs[b] = median_time(lambda: fn(mod), args.repeats)
        equal = all(same(results[backends[0]], results[b]) for b in backends)
        if not equal:
            mismatched.append(name)
        speed = secs["numpy"] / secs["numba"] if "numba" in secs else 1.0
        rows.append(f"{name}," + ",".join(f"{secs[b]:.4e}" for b in backends) + f",{speed:.2f},{equal}")

    model = DetectionEncoder(PipelineConfig(preset="toy", embed_dim=32, reduced_channels=4, heads=4,
                                            ffn_dim=64, num_queries=20))
    model.eval()
    image = Tensor(np.random.default_rng(1).standard_normal((1, 3, 128, 128)))
    secs = {}
    for b in backends:
        with kernels.use_backend(b), no_grad():
            secs[b] = median_time(lambda: model(image), args.repeats)
    speed = secs["numpy"] / secs["numba"] if "numba" in secs else 1.0
    rows.append("toy_forward_128," + ",".join(f"{secs[b]:.4e}" for b in backends) + f",{speed:.2f},")

    text = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    if mismatched:
        print(f"backends disagree on: {', '.join(mismatched)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
