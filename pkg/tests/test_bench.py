import numpy as np
import pytest

from scanet import tensor as T
from scanet.bench import FLOP_CONVENTION, benchmark, count_flops, forward_final, to_fp16
from scanet.data import stack, synth_generate
from scanet.model import LITE, build_model
from scanet.tensor import Tensor

REPORTED_LITE_MFLOPS = 111.216


def test_single_conv_flops():
    with T.flop_counter() as box:
        T.conv2d(T.zeros((1, 1, 10, 10)), T.zeros((1, 1, 1, 1)), T.zeros((1, 1, 1, 1)))
    assert box[0] == 200


def test_flop_convention_elementwise_and_bn():
    x = T.zeros((1, 2, 3, 3))
    with T.flop_counter() as box:
        T.relu6(x)
    assert box[0] == 18
    g, b = T.ones((1, 2, 1, 1)), T.zeros((1, 2, 1, 1))
    with T.flop_counter() as box:
        T.batch_norm(x, g, b, T.zeros((1, 2, 1, 1)), T.ones((1, 2, 1, 1)), training=False)
    assert box[0] == 36
    with T.flop_counter() as box:
        T.bilinear_upsample(x, 2)
    assert box[0] == 8 * 2 * 6 * 6


def test_flops_scale_with_area():
    assert count_flops(LITE, 64) == 4 * count_flops(LITE, 32)


def test_lite_flops_order_of_magnitude():
    mflops = count_flops(LITE) / 1e6
    print(f"lite @320: {mflops:.2f} MFLOPs ({FLOP_CONVENTION})")
    assert REPORTED_LITE_MFLOPS / 10 <= mflops <= REPORTED_LITE_MFLOPS * 10


def test_fp16_params_are_representable():
    p16 = to_fp16(build_model(LITE, 0))
    for _, t in p16.params():
        np.testing.assert_array_equal(t.data, t.data.astype(np.float16).astype(np.float32))


def test_fp16_forward_no_nan_and_agrees():
    cfg = LITE.with_size(32)
    params = build_model(cfg, 0)
    x, _ = stack(synth_generate(4, 32, seed=0))
    a = forward_final(cfg, params, x, "fp32").data
    b = forward_final(cfg, to_fp16(params), x, "fp16").data
    assert np.all(np.isfinite(b))
    assert np.max(np.abs(a - b)) < 1e-2


def test_forward_final_rejects_precision():
    with pytest.raises(ValueError):
        forward_final(LITE, build_model(LITE, 0), T.zeros((1, 3, 32, 32)), "bf16")


def test_benchmark_report():
    cfg = LITE.with_size(32)
    rep = benchmark(cfg, build_model(cfg, 0), "fp32", iters=5, warmup=1)
    assert rep.iterations == 5 and rep.warmup == 1 and rep.size == 32
    assert rep.p50_ms <= rep.p95_ms
    assert rep.throughput == pytest.approx(1000 / rep.mean_ms, rel=0.05)
    assert rep.flops == count_flops(cfg)
    assert "MAC=2" in rep.summary()
    with pytest.raises(ValueError):
        benchmark(cfg, build_model(cfg, 0), iters=0)


def test_benchmark_fp16_runs():
    cfg = LITE.with_size(32)
    rep = benchmark(cfg, build_model(cfg, 0), "fp16", iters=2, warmup=0)
    assert rep.precision == "fp16" and rep.mean_ms > 0


@pytest.mark.slow
def test_latency_stable_between_runs():
    cfg = LITE.with_size(64)
    params = build_model(cfg, 0)
    a = benchmark(cfg, params, iters=30, warmup=5)
    b = benchmark(cfg, params, iters=30, warmup=5)
    assert abs(a.mean_ms - b.mean_ms) <= 0.2 * min(a.mean_ms, b.mean_ms)
