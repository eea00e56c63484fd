"""Wall-time scaling of window attention against full attention."""
from __future__ import annotations

import math
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .association import MultiHeadAttention, WindowAttention, WindowAttentionConfig
from .autodiff.tensor import Tensor, no_grad

DEFAULT_SIZES = (256, 1024, 4096, 16384)
SLOPE_BOUNDS = {"window": (0.8, 1.3), "full": (1.7, 2.3)}


@dataclass(frozen=True)
class BenchConfig:
    embed_dim: int = 32
    heads: int = 2
    window: int = 4
    repeats: int = 3
    seed: int = 0


@dataclass(frozen=True)
class Timing:
    impl: str
    n: int
    median_seconds: float

    def line(self) -> str:
        return f"{self.impl},{self.n},{self.median_seconds:.6e}"


def _side(n: int) -> int:
    s = math.isqrt(n)
    if s * s != n:
        raise ValueError(f"token count {n} is not a perfect square")
    return s


def _runner(impl: str, n: int, cfg: BenchConfig):
    rng = np.random.default_rng(cfg.seed)
    s = _side(n)
    if impl == "window":
        mod = WindowAttention(WindowAttentionConfig(cfg.embed_dim, cfg.heads, cfg.window), rng)
        x = Tensor(rng.standard_normal((1, cfg.embed_dim, s, s)))
    elif impl == "full":
        mod = MultiHeadAttention(cfg.embed_dim, cfg.heads, rng)
        x = Tensor(rng.standard_normal((1, n, cfg.embed_dim)))
    else:
        raise ValueError(f"unknown attention impl {impl!r}")
    return lambda: mod(x)


def time_impl(impl: str, n: int, cfg: BenchConfig = BenchConfig()) -> Timing:
    if cfg.repeats < 3:
        raise ValueError("repeats must be >= 3")
    run = _runner(impl, n, cfg)
    times = []
    with no_grad():
        run()  # warm-up
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
    return Timing(impl, n, statistics.median(times))


def fit_slope(timings) -> float:
    """Least-squares slope of log(seconds) against log(n)."""
    n = np.log([t.n for t in timings])
    y = np.log([t.median_seconds for t in timings])
    return float(np.polyfit(n, y, 1)[0])


def run_bench(impl: str, sizes=DEFAULT_SIZES, cfg: BenchConfig = BenchConfig(), emit=None):
    sizes = list(sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be strictly ascending")
    out = []
    for n in sizes:
        t = time_impl(impl, n, cfg)
        out.append(t)
        if emit is not None:
            emit(t)
    return out, fit_slope(out)


def slope_ok(impl: str, slope: float) -> bool:
    lo, hi = SLOPE_BOUNDS[impl]
    return lo <= slope <= hi


def machine_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python {platform.python_version()} numpy {np.__version__}"
