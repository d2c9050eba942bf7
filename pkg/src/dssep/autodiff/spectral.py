"""Differentiable inverse STFT (linear, so its backward is the exact adjoint)."""

import numpy as np

from .. import dsp
from .tensor import as_tensor, make_op


def istft(real, imag, out_len, fft_size=dsp.FFT_SIZE, hop=dsp.HOP):
    """Waveform [..., out_len] from spectrogram parts [..., frames, fft_size/2+1]."""
    real, imag = as_tensor(real), as_tensor(imag, real.dtype)
    n_frames = real.shape[-2]
    frames = np.fft.irfft(real.data + 1j * imag.data, n=fft_size, axis=-1)
    out = dsp.overlap_add(frames, out_len, fft_size, hop).astype(real.dtype)
    weight = np.full(fft_size // 2 + 1, 2.0 / fft_size)
    weight[0] = weight[-1] = 1.0 / fft_size

    def backward(g):
        gframes = dsp.overlap_add_adjoint(g, n_frames, fft_size, hop)
        spec = np.fft.rfft(gframes, axis=-1) * weight
        return spec.real.astype(real.dtype), spec.imag.astype(real.dtype)

    return make_op(out, (real, imag), backward)
