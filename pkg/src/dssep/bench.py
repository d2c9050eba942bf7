"""Parameter and MAC accounting, real-time factor, and attention scaling measurements.

MACs count multiply-accumulate pairs in dense layers, convolutions and the
attention contractions only.  Normalisation, activations, softmax
exponentials and the STFT/ISTFT are excluded.  Audio is processed in 3 s
chunks without overlap.
"""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention, kernels
from .model import PATH_CHANNELS, PATHS, ModelConfig, count_parameters, init_weights, separate
from .dsp import SAMPLE_RATE

CHUNK_SECONDS = 3.0
SCALING_LENGTHS = (128, 256, 512, 1024, 2048)
MIN_RUNS = 20
MAC_NOTES = ("MACs count multiply-accumulate pairs of dense layers, convolutions and attention "
             "contractions; activations, normalisation, softmax exponentials and the STFT are excluded. "
             "Audio is processed in 3 s chunks with no overlap.")


class TimerResolutionError(RuntimeError):
    """Measured interval too short for the clock to resolve."""


# --------------------------------------------------------------------------
# analytic accounting


def count_params(cfg: ModelConfig):
    return count_parameters(cfg)


def dense_params(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def dense_macs(n_rows, d_in, d_out):
    return n_rows * d_in * d_out


def quadratic_attention_macs(n_len, head_dim, heads=1, groups=1):
    """Q K^T, Q.R and A V: three N x N x d contractions per head."""
    return 3 * groups * heads * n_len * n_len * head_dim


def linear_attention_macs(n_len, head_dim, heads=1, groups=1):
    """K^T V then Q (K^T V): two N x d x d contractions per head."""
    return 2 * groups * heads * n_len * head_dim * head_dim


def _conv_macs(rows, cols, cin, cout, kh, kw):
    return rows * cols * cout * kh * kw * cin


def _densenet_macs(t, f, c, n_dil):
    macs = sum(_conv_macs(t, f, c * (i + 1), c, 2, 3) for i in range(n_dil))
    return macs + _conv_macs(t, f, c * (n_dil + 1), c, 1, 1)


def _core_macs(cfg, groups, n_len):
    d, h = cfg.channels // cfg.heads, cfg.heads
    kind = cfg.attention.kind
    if kind == "quadratic_rsa":
        return quadratic_attention_macs(n_len, d, h, groups)
    if kind == "linear_rsa":
        return linear_attention_macs(n_len, d, h, groups)
    return 2 * groups * h * n_len * n_len * d


def _stage_macs(cfg, groups, n_len):
    c, rows = cfg.channels, groups * n_len
    ffn = dense_macs(rows, c, cfg.ffn_mult * c) + dense_macs(rows, cfg.ffn_mult * c, c)
    att = 4 * dense_macs(rows, c, c) + _core_macs(cfg, groups, n_len)
    if cfg.variant == "roformer":
        return att + ffn
    conv = dense_macs(rows, c, 2 * c) + rows * c * cfg.depthwise_kernel + dense_macs(rows, c, c)
    return 2 * ffn + att + conv


def forward_macs(cfg: ModelConfig, n_samples, batch=1):
    """Analytic MACs of one forward pass over ``batch`` signals of ``n_samples``."""
    c = cfg.channels
    t = n_samples // cfg.hop
    f = cfg.fft // 2
    f2 = f // 2
    n_dil = len(cfg.densenet_dilations)
    enc = _conv_macs(t, f, 3, c, 1, 1) + _densenet_macs(t, f, c, n_dil) + _conv_macs(t, f2, c, c, 1, 3)
    blocks = cfg.n_blocks * (_stage_macs(cfg, f2, t) + _stage_macs(cfg, t, f2))
    dec = 0
    for path in PATHS:
        k = PATH_CHANNELS[path]
        dec += (_densenet_macs(t, f2, c, n_dil) + _conv_macs(t, f2, c, 2 * c, 1, 3)
                + _conv_macs(t, f, c, k, 1, 1) + dense_macs(t, c, k))
    return batch * (enc + blocks + 2 * dec)


def count_macs(cfg: ModelConfig, audio_seconds=CHUNK_SECONDS):
    """MACs per second of audio, processing ``audio_seconds`` in 3 s chunks (remainder as a short chunk)."""
    total_samples = int(round(audio_seconds * SAMPLE_RATE))
    chunk = int(round(CHUNK_SECONDS * SAMPLE_RATE))
    full, rest = divmod(total_samples, chunk)
    macs = full * forward_macs(cfg, chunk)
    if rest:
        macs += forward_macs(cfg, rest)
    return macs / audio_seconds


# --------------------------------------------------------------------------
# timing


def _check_resolution(seconds):
    res = time.get_clock_info("perf_counter").resolution
    if seconds < 1000 * res:
        raise TimerResolutionError(
            f"measured {seconds:.3g} s is below 1000x the timer resolution ({res:.3g} s); use longer input")


def _median_time(fn, runs, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    _check_resolution(med)
    return med


def measure_rtf(cfg: ModelConfig, weights=None, runs=MIN_RUNS, seconds=CHUNK_SECONDS, seed=0, warmup=1):
    """Median over ``runs`` of forward wall-clock / audio duration (warm-up runs excluded)."""
    if runs < MIN_RUNS:
        raise ValueError(f"RTF needs at least {MIN_RUNS} runs, got {runs}")
    n = int(round(seconds * SAMPLE_RATE))
    if n < cfg.fft:
        raise TimerResolutionError(f"input of {n} samples is too short to time (needs >= {cfg.fft})")
    if weights is None:
        weights = init_weights(cfg, seed=seed)
    dtype = np.asarray(weights["enc.in.w"]).dtype
    x = (0.1 * np.random.default_rng(seed).standard_normal(n)).astype(dtype)
    return _median_time(lambda: separate(x, cfg, weights), runs, warmup) / seconds


def attention_inputs(kind, n_len, head_dim=12, heads=4, seed=0, clip=64):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((heads, n_len, head_dim)) for _ in range(3))
    if kind == "quadratic_rsa":
        table = 0.02 * rng.standard_normal((heads, 2 * clip + 1, head_dim))
        return lambda: kernels.quadratic_rsa(q, k, v, table, heads, clip)
    if kind == "linear_rsa":
        return lambda: kernels.linear_rsa(q, k, v)
    raise ValueError(f"unknown attention kind {kind!r}")


def scaling_curve(kinds=("linear_rsa", "quadratic_rsa"), lengths=SCALING_LENGTHS, runs=MIN_RUNS,
                  head_dim=12, heads=4):
    """{kind: [(N, median seconds), ...]} for the isolated attention cores."""
    out = {}
    for kind in kinds:
        out[kind] = [(n, _median_time(attention_inputs(kind, n, head_dim, heads), runs)) for n in lengths]
    return out


def latency_ratio(curve, hi=2048, lo=256):
    table = dict(curve)
    return table[hi] / table[lo]


# --------------------------------------------------------------------------
# numba vs numpy


def kernel_benchmark(runs=5, seed=0):
    """Median seconds of each kernel's numba and numpy implementation on fixed inputs."""
    rng = np.random.default_rng(seed)
    n_img = 50_000
    delays = rng.uniform(0, 20_000, n_img)
    amps = rng.standard_normal(n_img) / (1 + delays)
    q, k, v = (rng.standard_normal((8, 512, 12)) for _ in range(3))
    table = 0.02 * rng.standard_normal((4, 129, 12))
    args = {
        "ism_accumulate": (delays, amps, 24_000),
        "quadratic_rsa": (q, k, v, table, 4, 64),
        "linear_rsa": (q, k, v),
    }
    report = {}
    for name, (numpy_fn, numba_fn) in kernels.KERNELS.items():
        entry = {"numpy_s": _median_time(lambda: numpy_fn(*args[name]), runs)}
        if numba_fn is not None:
            entry["numba_s"] = _median_time(lambda: numba_fn(*args[name]), runs)
            diff = np.max(np.abs(numba_fn(*args[name]) - numpy_fn(*args[name])))
            entry["max_abs_diff"] = float(diff)
            entry["speedup"] = entry["numpy_s"] / entry["numba_s"]
        report[name] = entry
    return report


# --------------------------------------------------------------------------
# report


@dataclass
class BenchReport:
    variant: str
    params: int
    macs_per_second_audio: float
    rtf: float
    scaling_curve: dict = field(default_factory=dict)
    backend: str = kernels.BACKEND
    threads: str = ""
    notes: str = MAC_NOTES

    def to_dict(self):
        d = asdict(self)
        d["scaling_curve"] = {k: [[n, t] for n, t in v] for k, v in self.scaling_curve.items()}
        return d


def run_bench(cfg: ModelConfig, runs=MIN_RUNS, seconds=CHUNK_SECONDS, seed=0, lengths=SCALING_LENGTHS,
              curve=True):
    weights = init_weights(cfg, seed=seed)
    rtf = measure_rtf(cfg, weights, runs=runs, seconds=seconds, seed=seed)
    sc = scaling_curve(lengths=lengths, runs=runs) if curve else {}
    return BenchReport(cfg.variant, count_params(cfg), count_macs(cfg), rtf, sc,
                       threads=os.environ.get("OMP_NUM_THREADS", ""))
