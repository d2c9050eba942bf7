"""Hot numeric kernels.

Every kernel has two implementations with the same signature: a numba
``@njit`` loop nest and a vectorised numpy version.  The public name binds
to the numba one unless numba is missing or ``DSSEP_DISABLE_NUMBA`` is set.
Both are always importable (``KERNELS``) so they can be cross-checked and
benchmarked against each other.
"""

import math

import numpy as np

from ._jit import USE_NUMBA, njit

#: Half-width of the windowed-sinc fractional delay filter (81 taps total).
ISM_HALF_TAPS = 40


# --------------------------------------------------------------------------
# image-source accumulation


def _ism_accumulate_loop(delays, amplitudes, length, half_taps):
    out = np.zeros(length)
    width = half_taps + 1.0
    n_taps = 2 * half_taps + 1
    step = math.pi / width
    # cos(step*(k - f)) = cos(step*k) cos(step*f) + sin(step*k) sin(step*f)
    cos_k = np.empty(n_taps)
    sin_k = np.empty(n_taps)
    for t in range(n_taps):
        cos_k[t] = math.cos(step * (t - half_taps))
        sin_k[t] = math.sin(step * (t - half_taps))
    for i in range(delays.shape[0]):
        a = amplitudes[i]
        if a == 0.0:
            continue
        d = delays[i]
        base = int(math.floor(d))
        frac = d - base
        cf = math.cos(step * frac)
        sf = math.sin(step * frac)
        # sin(pi*(k - f)) = (-1)^(k+1) sin(pi*f)
        spf = math.sin(math.pi * frac)
        for t in range(n_taps):
            k = t - half_taps
            n = base + k
            if n < 0 or n >= length:
                continue
            x = k - frac
            w = 0.5 * (1.0 + cos_k[t] * cf + sin_k[t] * sf)
            if x == 0.0:
                s = 1.0
            else:
                sign = -1.0 if (k % 2 == 0) else 1.0
                s = sign * spf / (math.pi * x)
            out[n] += a * w * s
    return out


def ism_accumulate_numpy(delays, amplitudes, length, half_taps=ISM_HALF_TAPS, chunk=4096):
    """Sum Hann-windowed sinc impulses at fractional ``delays`` (in samples)."""
    delays = np.asarray(delays, dtype=np.float64)
    amplitudes = np.asarray(amplitudes, dtype=np.float64)
    out = np.zeros(length)
    taps = np.arange(-half_taps, half_taps + 1)
    width = half_taps + 1.0
    for start in range(0, delays.shape[0], chunk):
        d = delays[start:start + chunk]
        a = amplitudes[start:start + chunk]
        base = np.floor(d)
        x = taps[None, :] - (d - base)[:, None]
        vals = a[:, None] * 0.5 * (1.0 + np.cos(np.pi * x / width)) * np.sinc(x)
        idx = base.astype(np.int64)[:, None] + taps[None, :]
        ok = (idx >= 0) & (idx < length)
        out += np.bincount(idx[ok], weights=vals[ok], minlength=length)[:length]
    return out


_ism_accumulate_numba = njit(_ism_accumulate_loop)


def _ism_numba_entry(delays, amplitudes, length, half_taps=ISM_HALF_TAPS):
    return _ism_accumulate_numba(
        np.ascontiguousarray(delays, dtype=np.float64),
        np.ascontiguousarray(amplitudes, dtype=np.float64),
        int(length),
        int(half_taps),
    )


# --------------------------------------------------------------------------
# quadratic relation-aware attention (inference only)


def _quadratic_rsa_loop(q, k, v, table, heads, clip):
    groups, n_len, dim = q.shape
    out = np.zeros(q.shape, dtype=q.dtype)
    scores = np.empty(n_len)
    inv = 1.0 / math.sqrt(dim)
    for g in range(groups):
        h = g % heads
        for n in range(n_len):
            top = -np.inf
            for m in range(n_len):
                r = m - n
                if r > clip:
                    r = clip
                elif r < -clip:
                    r = -clip
                r += clip
                s = 0.0
                for j in range(dim):
                    s += q[g, n, j] * (k[g, m, j] + table[h, r, j])
                s *= inv
                scores[m] = s
                if s > top:
                    top = s
            total = 0.0
            for m in range(n_len):
                e = math.exp(scores[m] - top)
                scores[m] = e
                total += e
            for m in range(n_len):
                p = scores[m] / total
                for j in range(dim):
                    out[g, n, j] += p * v[g, m, j]
    return out


def relative_index(n_len, clip):
    """Clipped relative offsets ``m - n`` shifted to table rows, shape [N, N]."""
    pos = np.arange(n_len)
    return np.clip(pos[None, :] - pos[:, None], -clip, clip) + clip


def quadratic_rsa_numpy(q, k, v, table, heads, clip, row_chunk=256):
    """softmax((q k^T + q.R) / sqrt(d)) v for q, k, v of shape [G, N, d].

    ``table`` is [heads, 2*clip+1, d]; group ``g`` uses head ``g % heads``.
    Query rows are processed in chunks so the gathered R stays bounded.
    """
    groups, n_len, dim = q.shape
    q4 = q.reshape(groups // heads, heads, n_len, dim)
    k4 = k.reshape(q4.shape)
    v4 = v.reshape(q4.shape)
    out = np.empty_like(q4)
    idx = relative_index(n_len, clip)
    inv = 1.0 / math.sqrt(dim)
    for r0 in range(0, n_len, row_chunk):
        rows = slice(r0, min(r0 + row_chunk, n_len))
        qr = q4[:, :, rows]
        s = qr @ np.swapaxes(k4, -1, -2)
        rel = table[:, idx[rows]]  # [H, nr, N, d]
        s = s + (qr[..., None, :] @ np.swapaxes(rel, -1, -2))[..., 0, :]
        s *= inv
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, :, rows] = s @ v4
    return out.reshape(q.shape)


_quadratic_rsa_numba = njit(_quadratic_rsa_loop)


def _quadratic_numba_entry(q, k, v, table, heads, clip):
    return _quadratic_rsa_numba(
        np.ascontiguousarray(q),
        np.ascontiguousarray(k),
        np.ascontiguousarray(v),
        np.ascontiguousarray(table, dtype=q.dtype),
        int(heads),
        int(clip),
    )


# --------------------------------------------------------------------------
# linear attention with softmax feature maps (inference only)


def _linear_rsa_loop(q, k, v):
    groups, n_len, dim = q.shape
    dv = v.shape[2]
    out = np.zeros((groups, n_len, dv), dtype=q.dtype)
    sk = np.empty((n_len, dim))
    kv = np.empty((dim, dv))
    sq = np.empty(dim)
    inv = 1.0 / math.sqrt(dim)
    for g in range(groups):
        for i in range(dim):
            top = -np.inf
            for n in range(n_len):
                if k[g, n, i] > top:
                    top = k[g, n, i]
            total = 0.0
            for n in range(n_len):
                e = math.exp(k[g, n, i] - top)
                sk[n, i] = e
                total += e
            for n in range(n_len):
                sk[n, i] /= total
        kv[:, :] = 0.0
        for n in range(n_len):
            for i in range(dim):
                a = sk[n, i]
                for j in range(dv):
                    kv[i, j] += a * v[g, n, j]
        for n in range(n_len):
            top = -np.inf
            for i in range(dim):
                if q[g, n, i] > top:
                    top = q[g, n, i]
            total = 0.0
            for i in range(dim):
                e = math.exp(q[g, n, i] - top)
                sq[i] = e
                total += e
            for i in range(dim):
                a = sq[i] / total * inv
                for j in range(dv):
                    out[g, n, j] += a * kv[i, j]
    return out


def linear_rsa_numpy(q, k, v):
    """softmax_d(q) (softmax_N(k)^T v) / sqrt(d) for already-rotated q, k."""
    sk = np.exp(k - k.max(axis=-2, keepdims=True))
    sk /= sk.sum(axis=-2, keepdims=True)
    sq = np.exp(q - q.max(axis=-1, keepdims=True))
    sq /= sq.sum(axis=-1, keepdims=True)
    kv = np.swapaxes(sk, -1, -2) @ v
    return (sq @ kv) / math.sqrt(q.shape[-1])


_linear_rsa_numba = njit(_linear_rsa_loop)


def _linear_numba_entry(q, k, v):
    return _linear_rsa_numba(np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v))


# --------------------------------------------------------------------------

KERNELS = {
    "ism_accumulate": (ism_accumulate_numpy, _ism_numba_entry if _ism_accumulate_numba else None),
    "quadratic_rsa": (quadratic_rsa_numpy, _quadratic_numba_entry if _quadratic_rsa_numba else None),
    "linear_rsa": (linear_rsa_numpy, _linear_numba_entry if _linear_rsa_numba else None),
}


def _pick(name):
    numpy_fn, numba_fn = KERNELS[name]
    return numba_fn if (USE_NUMBA and numba_fn is not None) else numpy_fn


ism_accumulate = _pick("ism_accumulate")
quadratic_rsa = _pick("quadratic_rsa")
linear_rsa = _pick("linear_rsa")
BACKEND = "numba" if USE_NUMBA else "numpy"
