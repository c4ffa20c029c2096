"""FLOP counting and single-image latency benchmark (fp32 / emulated fp16)."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .blocks import ParamStore
from .model import ScanetConfig, build_model, scanet_forward
from .tensor import Tensor

FLOP_CONVENTION = "MAC=2 FLOPs; elementwise=1/elem; batchnorm=2/elem; bilinear=8/output elem; conv bias not counted"


def count_flops(cfg: ScanetConfig, size: int | None = None) -> int:
    """FLOPs of one inference forward at ``size`` (default: the config's)."""
    size = size or cfg.input_size
    params = build_model(cfg.with_size(size), seed=0)
    with T.flop_counter() as box, T.no_grad():
        scanet_forward(cfg, T.zeros((1, 3, size, size)), params, training=False)
    return box[0]


def to_fp16(params: ParamStore) -> ParamStore:
    """Copy of ``params`` with every tensor rounded through binary16."""
    out = params.copy()
    for _, t in list(out.params()) + list(out.buffers()):
        t.data[...] = T.cast_f16_roundtrip(t.data)
    return out


def forward_final(cfg: ScanetConfig, params: ParamStore, image: Tensor, precision: str = "fp32") -> Tensor:
    """Inference forward; in fp16 mode the input and every op output are rounded."""
    if precision not in ("fp32", "fp16"):
        raise ValueError(f"precision must be fp32 or fp16, got {precision!r}")
    with T.no_grad():
        if precision == "fp16":
            with T.fp16_emulation():
                return scanet_forward(cfg, T.cast_f16_roundtrip(image), params, training=False).final
        return scanet_forward(cfg, image, params, training=False).final


@dataclass
class BenchReport:
    variant: str
    precision: str
    iterations: int
    warmup: int
    size: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    throughput: float
    flops: int
    flop_convention: str = FLOP_CONVENTION

    def as_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        return (
            f"{self.variant} {self.precision} size={self.size} iters={self.iterations} "
            f"mean={self.mean_ms:.3f}ms p50={self.p50_ms:.3f}ms p95={self.p95_ms:.3f}ms "
            f"fps={self.throughput:.2f} MFLOPs={self.flops / 1e6:.3f} ({self.flop_convention})"
        )


def benchmark(
    cfg: ScanetConfig,
    params: ParamStore,
    precision: str = "fp32",
    iters: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> BenchReport:
    """Time ``iters`` batch-1 forwards after ``warmup`` untimed ones."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    size = cfg.input_size
    if precision == "fp16":
        params = to_fp16(params)
    image = Tensor(np.random.default_rng(seed).uniform(-0.5, 0.5, (1, 3, size, size)))
    for _ in range(warmup):
        forward_final(cfg, params, image, precision)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        forward_final(cfg, params, image, precision)
        times.append((time.perf_counter() - t0) * 1e3)
    lat = np.asarray(times)
    mean = float(lat.mean())
    return BenchReport(
        variant=cfg.variant,
        precision=precision,
        iterations=iters,
        warmup=warmup,
        size=size,
        mean_ms=mean,
        p50_ms=float(np.percentile(lat, 50)),
        p95_ms=float(np.percentile(lat, 95)),
        throughput=1000.0 / mean,
        flops=count_flops(cfg),
    )
