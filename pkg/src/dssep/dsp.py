"""STFT / ISTFT analysis-synthesis and power-law spectral compression.

Frames are centred on multiples of the hop (reflection padding of
``fft_size // 2``), so a signal of ``L`` samples yields ``L // hop`` frames.
Synthesis is weighted overlap-add normalised by the summed squared window,
which inverts the analysis exactly wherever at least one frame covers a
sample (the periodic Hamming window never reaches zero).
"""

from dataclasses import dataclass, replace

import numpy as np

FFT_SIZE = 512
HOP = 128
SAMPLE_RATE = 16000
COMPRESS_EXPONENT = 0.3


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Real/imag parts of shape [..., frames, bins]."""

    real: np.ndarray
    imag: np.ndarray
    fft_size: int = FFT_SIZE
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    @property
    def n_frames(self):
        return self.real.shape[-2]

    @property
    def n_bins(self):
        return self.real.shape[-1]

    def magnitude(self):
        return np.hypot(self.real, self.imag)

    def to_complex(self):
        return self.real + 1j * self.imag


def hamming(n):
    """Periodic Hamming window."""
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames_for(length, hop=HOP):
    return length // hop


def _frames(wave, fft_size, hop):
    pad = fft_size // 2
    n = n_frames_for(wave.shape[-1], hop)
    widths = [(0, 0)] * (wave.ndim - 1) + [(pad, pad)]
    padded = np.pad(wave, widths, mode="reflect")
    view = np.lib.stride_tricks.sliding_window_view(padded, fft_size, axis=-1)
    return view[..., : (n - 1) * hop + 1 : hop, :]


def stft(wave, fft_size=FFT_SIZE, hop=HOP, sample_rate=SAMPLE_RATE) -> ComplexSpectrogram:
    """Hamming-windowed STFT of ``wave`` (shape [..., L]); returns [..., L // hop, fft_size/2+1]."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.size == 0 or wave.shape[-1] == 0:
        raise ValueError("stft of an empty signal")
    if wave.shape[-1] < fft_size:
        raise ValueError(f"signal of {wave.shape[-1]} samples is shorter than fft_size={fft_size}")
    frames = _frames(wave, fft_size, hop) * hamming(fft_size)
    spec = np.fft.rfft(frames, axis=-1)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), fft_size, hop, sample_rate)


def synthesis_norm(n_frames, fft_size=FFT_SIZE, hop=HOP):
    """Summed squared window over the padded time axis, length (n_frames - 1) * hop + fft_size."""
    win2 = hamming(fft_size) ** 2
    total = np.zeros((n_frames - 1) * hop + fft_size)
    for t in range(n_frames):
        total[t * hop: t * hop + fft_size] += win2
    return total


def max_output_length(n_frames, fft_size=FFT_SIZE, hop=HOP):
    return (n_frames - 1) * hop + fft_size - fft_size // 2


def overlap_add(frames, out_len, fft_size=FFT_SIZE, hop=HOP):
    """Windowed overlap-add of time frames [..., T, N] with squared-window normalisation."""
    n = frames.shape[-2]
    if out_len > max_output_length(n, fft_size, hop):
        raise ValueError(
            f"out_len={out_len} exceeds the {max_output_length(n, fft_size, hop)} samples "
            f"synthesizable from {n} frames"
        )
    frames = frames * hamming(fft_size)
    total = np.zeros(frames.shape[:-2] + ((n - 1) * hop + fft_size,))
    for t in range(n):
        total[..., t * hop: t * hop + fft_size] += frames[..., t, :]
    total /= synthesis_norm(n, fft_size, hop)
    pad = fft_size // 2
    return total[..., pad: pad + out_len]


def overlap_add_adjoint(grad, n_frames, fft_size=FFT_SIZE, hop=HOP):
    """Adjoint of :func:`overlap_add` (maps output-sample grads to frame grads)."""
    pad = fft_size // 2
    full = np.zeros(grad.shape[:-1] + ((n_frames - 1) * hop + fft_size,))
    full[..., pad: pad + grad.shape[-1]] = grad
    full /= synthesis_norm(n_frames, fft_size, hop)
    view = np.lib.stride_tricks.sliding_window_view(full, fft_size, axis=-1)
    return view[..., : (n_frames - 1) * hop + 1 : hop, :] * hamming(fft_size)


def istft(spec: ComplexSpectrogram, out_len) -> np.ndarray:
    """Inverse of :func:`stft`, trimmed to ``out_len`` samples."""
    frames = np.fft.irfft(spec.real + 1j * spec.imag, n=spec.fft_size, axis=-1)
    return overlap_add(frames, out_len, spec.fft_size, spec.hop)


def compress(spec: ComplexSpectrogram, exponent=COMPRESS_EXPONENT) -> ComplexSpectrogram:
    """Magnitude -> magnitude ** exponent, phase untouched; zero stays zero."""
    if not 0.0 < exponent <= 1.0:
        raise ValueError(f"compression exponent must lie in (0, 1], got {exponent}")
    return _power_law(spec, exponent)


def decompress(spec: ComplexSpectrogram, exponent=COMPRESS_EXPONENT) -> ComplexSpectrogram:
    """Exact inverse of :func:`compress`."""
    if not 0.0 < exponent <= 1.0:
        raise ValueError(f"compression exponent must lie in (0, 1], got {exponent}")
    return _power_law(spec, 1.0 / exponent)


def _power_law(spec, power):
    mag = spec.magnitude()
    scale = np.zeros_like(mag)
    nz = mag > 0
    scale[nz] = mag[nz] ** (power - 1.0)
    return replace(spec, real=spec.real * scale, imag=spec.imag * scale)
