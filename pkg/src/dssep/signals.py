"""Built-in dry-source and background-noise generators plus WAV ingestion.

The generators are crude stand-ins for real speech/noise corpora: enough
spectro-temporal structure (harmonics, formants, syllabic envelopes, pauses)
for a separator to have something to learn, and fully deterministic given
the numpy ``Generator`` passed in.
"""

from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

SAMPLE_RATE = 16000


def _resonator(freq, bandwidth, fs):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2 * np.pi * freq / fs
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([1.0 - r]), a


def _normalize(x, rms=0.1):
    level = np.sqrt(np.mean(x ** 2))
    if level == 0.0:
        return x
    return x * (rms / level)


def synth_speech(rng, n_samples, fs=SAMPLE_RATE):
    """Speech-like babble: pitch-modulated harmonics, per-syllable formants, pauses."""
    t = np.arange(n_samples) / fs
    f0_base = rng.uniform(90.0, 240.0)
    vib_rate = rng.uniform(0.5, 3.0)
    f0 = f0_base * (1.0 + 0.12 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    f0 *= 1.0 + 0.02 * np.cumsum(rng.standard_normal(n_samples)) / np.sqrt(n_samples)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int((fs / 2 - 200) // (f0_base * 1.15))
    source = np.zeros(n_samples)
    for h in range(1, n_harm + 1):
        source += np.sin(h * phase) / h
    source += 0.05 * rng.standard_normal(n_samples)

    out = np.zeros(n_samples)
    pos = int(rng.uniform(0.0, 0.2) * fs)
    while pos < n_samples:
        syl = int(rng.uniform(0.12, 0.32) * fs)
        end = min(pos + syl, n_samples)
        chunk = source[pos:end]
        voiced = np.zeros_like(chunk)
        formants = (
            (rng.uniform(300, 900), rng.uniform(60, 160)),
            (rng.uniform(900, 2500), rng.uniform(80, 200)),
            (rng.uniform(2400, 3600), rng.uniform(120, 260)),
        )
        for freq, bw in formants:
            b, a = _resonator(freq, bw, fs)
            voiced += sps.lfilter(b, a, chunk)
        env = np.hanning(end - pos + 2)[1:-1] * rng.uniform(0.4, 1.0)
        out[pos:end] += voiced * env
        pos = end
        if rng.random() < 0.3:
            pos += int(rng.uniform(0.08, 0.4) * fs)
    return _normalize(out)


def pink_noise(rng, n_samples):
    spec = np.fft.rfft(rng.standard_normal(n_samples))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n_samples)


def synth_noise(rng, n_samples, fs=SAMPLE_RATE):
    """Pink noise plus amplitude-modulated band-passed babble-like noise."""
    pink = _normalize(pink_noise(rng, n_samples))
    sos = sps.butter(4, [300.0, 3400.0], btype="bandpass", fs=fs, output="sos")
    band = sps.sosfilt(sos, rng.standard_normal(n_samples))
    t = np.arange(n_samples) / fs
    am = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    babble = _normalize(band * am)
    w = rng.uniform(0.2, 0.8)
    return _normalize(w * pink + (1.0 - w) * babble)


def read_wav(path, expect_rate=SAMPLE_RATE):
    """Read a mono WAV as float64 in [-1, 1]; raises ValueError on rate/channel mismatch."""
    rate, data = wavfile.read(str(path))
    if rate != expect_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expect_rate} Hz")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        data = data.astype(np.float64) / max(abs(info.min), info.max)
    return data.astype(np.float64)


def write_wav(path, data, rate=SAMPLE_RATE):
    """Write 32-bit float mono WAV atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, rate, np.asarray(data, dtype=np.float32))
    tmp.replace(path)


class WavPool:
    """Deterministic random crops from a directory of 16 kHz mono WAV files."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.files = sorted(self.directory.glob("*.wav"))
        if not self.files:
            raise FileNotFoundError(f"no .wav files in {self.directory}")

    def draw(self, rng, n_samples):
        path = self.files[rng.integers(len(self.files))]
        data = read_wav(path)
        if data.shape[0] <= n_samples:
            return np.pad(data, (0, n_samples - data.shape[0]))
        start = rng.integers(data.shape[0] - n_samples + 1)
        return data[start:start + n_samples]
