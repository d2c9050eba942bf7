import numpy as np
import pytest

from dssep import attention, bench, kernels
from dssep import autodiff as ad
from dssep.model import VARIANTS, ModelConfig, init_weights, separate


def test_dense_accounting():
    assert bench.dense_params(48, 48) == 2352
    assert bench.dense_params(48, 48, bias=False) == 2304
    assert bench.dense_macs(375, 48, 96) == 375 * 48 * 96


@pytest.mark.parametrize("n", [128, 375, 1000])
def test_attention_mac_ratios_are_exact(n):
    assert bench.quadratic_attention_macs(2 * n, 12, 4) == 4 * bench.quadratic_attention_macs(n, 12, 4)
    assert bench.linear_attention_macs(2 * n, 12, 4) == 2 * bench.linear_attention_macs(n, 12, 4)


def test_quadratic_over_linear_at_375():
    # three N*N*d contractions against two N*d*d ones: 3N / 2d
    ratio = bench.quadratic_attention_macs(375, 12) / bench.linear_attention_macs(375, 12)
    assert ratio == pytest.approx(3 * 375 / (2 * 12), rel=1e-2)
    for variant in ("proposed_linear", "baseline_quadratic", "roformer"):
        cfg = ModelConfig(variant=variant)
        assert attention.core_macs(cfg.attention, 3, 375) == bench._core_macs(cfg, 3, 375)


@pytest.mark.parametrize("variant", VARIANTS)
def test_analytic_macs_equal_instrumented(variant):
    cfg = ModelConfig(variant=variant, channels=8, heads=2, blocks=4)
    w = init_weights(cfg)
    for n in (1000, 2345):
        with ad.no_grad(), ad.count_macs() as counter:
            separate(np.zeros(n, np.float32), cfg, w)
        assert counter.total == bench.forward_macs(cfg, n)


def test_default_config_accounting():
    params = {v: bench.count_params(ModelConfig(variant=v)) for v in VARIANTS}
    assert 1.0e6 <= params["proposed_linear"] <= 1.7e6
    assert params["enc_dec_only"] < params["proposed_linear"] < params["baseline_quadratic"]
    macs = {v: bench.count_macs(ModelConfig(variant=v)) for v in VARIANTS}
    assert 18e9 <= macs["proposed_linear"] <= 33e9
    assert macs["proposed_linear"] < macs["baseline_quadratic"]


def test_count_macs_chunking():
    cfg = ModelConfig(channels=8, heads=2)
    three = bench.count_macs(cfg, 3.0)
    assert bench.count_macs(cfg, 6.0) == three
    assert bench.count_macs(cfg, 4.0) * 4.0 == bench.forward_macs(cfg, 48000) + bench.forward_macs(cfg, 16000)


def test_rtf_requirements():
    cfg = ModelConfig(channels=8, heads=2, blocks=1, reduced=True)
    with pytest.raises(ValueError, match="at least 20"):
        bench.measure_rtf(cfg, runs=5)
    with pytest.raises(bench.TimerResolutionError):
        bench.measure_rtf(cfg, seconds=0.01)
    with pytest.raises(bench.TimerResolutionError):
        bench._check_resolution(1e-12)


def test_rtf_positive_and_stable():
    cfg = ModelConfig(channels=8, heads=2, blocks=1, reduced=True)
    w = init_weights(cfg)
    a = bench.measure_rtf(cfg, w, runs=20, seconds=0.5)
    b = bench.measure_rtf(cfg, w, runs=20, seconds=0.5)
    assert a > 0 and b > 0
    assert abs(a - b) / min(a, b) < 0.2


def test_encoder_decoder_only_is_faster():
    fast = bench.measure_rtf(ModelConfig(variant="enc_dec_only", channels=8, heads=2), seconds=0.5)
    slow = bench.measure_rtf(ModelConfig(variant="proposed_linear", channels=8, heads=2), seconds=0.5)
    assert fast < slow


def test_latency_scaling():
    curve = bench.scaling_curve(lengths=(256, 2048), runs=20)
    assert bench.latency_ratio(curve["linear_rsa"]) <= 12
    assert bench.latency_ratio(curve["quadratic_rsa"]) >= 40


def test_attention_inputs_rejects_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        bench.attention_inputs("rope", 16)


def test_report_schema():
    cfg = ModelConfig(channels=8, heads=2, blocks=1, reduced=True)
    rep = bench.run_bench(cfg, runs=20, seconds=0.5, lengths=(128, 256))
    d = rep.to_dict()
    assert d["variant"] == "proposed_linear" and d["backend"] == kernels.BACKEND
    assert d["params"] > 0 and d["macs_per_second_audio"] > 0 and d["rtf"] > 0
    assert [n for n, _ in d["scaling_curve"]["quadratic_rsa"]] == [128, 256]
    assert all(t > 0 for n, t in d["scaling_curve"]["linear_rsa"])
    assert "3 s" in d["notes"]


def test_kernel_benchmark_entries():
    rep = bench.kernel_benchmark(runs=2)
    assert set(rep) == set(kernels.KERNELS)
    for entry in rep.values():
        assert entry["numpy_s"] > 0
        if "numba_s" in entry:
            assert entry["max_abs_diff"] < 1e-9
