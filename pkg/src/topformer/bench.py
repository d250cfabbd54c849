"""Wall-clock latency of a full forward pass."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from . import model as M
from . import tensor as T
from .config import VariantConfig
from .iofmt import random_init


@dataclass
class BenchResult:
    variant: str
    input_hw: tuple
    threads: int
    samples_ms: List[float]

    @property
    def min_ms(self):
        return min(self.samples_ms)

    @property
    def median_ms(self):
        return statistics.median(self.samples_ms)

    @property
    def mean_ms(self):
        return statistics.fmean(self.samples_ms)

    def lines(self):
        yield f"variant\t{self.variant}"
        yield f"input\t{self.input_hw[0]}x{self.input_hw[1]}"
        yield f"threads\t{self.threads}"
        yield f"iters\t{len(self.samples_ms)}"
        yield f"min_ms\t{self.min_ms:.3f}"
        yield f"median_ms\t{self.median_ms:.3f}"
        yield f"mean_ms\t{self.mean_ms:.3f}"
        yield "samples_ms\t" + ",".join(f"{s:.3f}" for s in self.samples_ms)


def run_benchmark(cfg: VariantConfig, h: int = 512, w: int = 512, warmup: int = 2, iters: int = 20,
                  threads: int = 1, seed: int = 0) -> BenchResult:
    """Seeded random weights, BN folded, batch 1."""
    if iters < 3:
        raise ValueError("iters must be >= 3")
    model = M.build(cfg)
    M.check_input(model, h, w)
    bound = M.fold(M.bind(model, random_init(model, seed)))
    x = np.random.default_rng(seed).standard_normal((1, 3, h, w)).astype(np.float32)
    prev = T.get_num_threads()
    T.set_num_threads(threads)
    try:
        for _ in range(warmup):
            M.forward(bound, x)
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            M.forward(bound, x)
            samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        T.set_num_threads(prev)
    return BenchResult(cfg.name, (h, w), threads, samples)
