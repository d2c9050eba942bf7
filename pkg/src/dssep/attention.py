"""Relation-aware self-attention: quadratic (learned relative table) and linear (RoPE + softmax kernels).

Quadratic RSA::

    softmax((Q K^T + Q.R) / sqrt(d)) V,    (Q.R)[b, n, m] = sum_d Q[b, n, d] R[n, m, d]

Linear RSA::

    softmax_d(rope(Q)) (softmax_N(rope(K))^T V) / sqrt(d)

evaluated key-value product first so the cost is O(N d^2).  ``d`` is the
per-head width throughout.

The core functions build autodiff graphs.  :func:`mhsa` switches to the
compiled kernels in :mod:`dssep.kernels` when no gradient is needed.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

KINDS = ("quadratic_rsa", "linear_rsa", "rope_softmax_quadratic")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int = 48
    heads: int = 4
    kind: str = "linear_rsa"
    max_rel_distance: int = 64
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attention kind must be one of {KINDS}, got {self.kind!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ValueError(f"head dim {self.head_dim} must be even for rotary pairs")

    @property
    def head_dim(self):
        return self.dim // self.heads


# --------------------------------------------------------------------------
# rotary embedding


def rope_angles(positions, head_dim, base=10000.0):
    """Angles m * theta_i, theta_i = base^(-2i/d), shape [N, d/2]."""
    if head_dim % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {head_dim}")
    theta = base ** (-np.arange(0, head_dim, 2) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]


def _rotate(x, cos, sin):
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x, positions=None, base=10000.0):
    """Rotate feature pairs (2i, 2i+1) of x [..., N, d] by angle position * theta_i."""
    x = ad.as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    if positions is None:
        positions = np.arange(n)
    ang = rope_angles(positions, d, base)
    cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    out = _rotate(x.data, cos, sin)
    # rotations are orthogonal: the adjoint rotates back
    return ad.make_op(out, (x,), lambda g: (_rotate(g, cos, -sin),))


# --------------------------------------------------------------------------
# cores


def gather_relative(table, n_len, clip):
    """[2c+1, ...] table -> [N, M, ...] relative embeddings R[n, m] = table[clip(m - n)]."""
    table = ad.as_tensor(table)
    if table.shape[0] != 2 * clip + 1:
        raise ValueError(f"relative table has {table.shape[0]} rows, expected {2 * clip + 1}")
    return ad.take_rows(table, kernels.relative_index(n_len, clip))


def quadratic_rsa(q, k, v, rel=None, clip=None, return_weights=False):
    """softmax((Q K^T + Q.R) / sqrt(d)) V for q, k, v of shape [..., N, d].

    ``rel`` is either gathered embeddings [..., N, M, d] or a table
    [2*clip+1, d] (gathered here).  ``None`` gives plain scaled dot-product
    attention.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    n, d = q.shape[-2], q.shape[-1]
    scores = q @ k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    if rel is not None:
        rel = ad.as_tensor(rel, q.dtype)
        if rel.ndim == 2:
            if clip is None:
                clip = (rel.shape[0] - 1) // 2
            rel = gather_relative(rel, n, clip)
        if rel.shape[-3] != rel.shape[-2] or rel.shape[-3] != n:
            raise ValueError(f"relative embeddings {rel.shape} must be [N, N, d] with N={n}")
        axes = tuple(range(rel.ndim - 2)) + (rel.ndim - 1, rel.ndim - 2)
        q_rows = q.reshape(q.shape[:-1] + (1, d))
        qr = (q_rows @ rel.transpose(axes)).reshape(scores.shape)
        scores = scores + qr
    weights = ad.softmax(ad.scale(scores, 1.0 / np.sqrt(d)), axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def linear_rsa(q, k, v, positions=None, base=10000.0):
    """softmax_d(rope(Q)) (softmax_N(rope(K))^T V) / sqrt(d), key-value product first."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d = q.shape[-1]
    qr = ad.softmax(rope_apply(q, positions, base), axis=-1)
    kr = ad.softmax(rope_apply(k, positions, base), axis=-2)
    swap = tuple(range(kr.ndim - 2)) + (kr.ndim - 1, kr.ndim - 2)
    context = kr.transpose(swap) @ v
    return ad.scale(qr @ context, 1.0 / np.sqrt(d))


def linear_rsa_quadratic_order(q, k, v, positions=None, base=10000.0):
    """Same value as :func:`linear_rsa` associated as (phi_q phi_k^T) V; O(N^2 d)."""
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d = q.shape[-1]
    qr = ad.softmax(rope_apply(q, positions, base), axis=-1)
    kr = ad.softmax(rope_apply(k, positions, base), axis=-2)
    swap = tuple(range(kr.ndim - 2)) + (kr.ndim - 1, kr.ndim - 2)
    return ad.scale((qr @ kr.transpose(swap)) @ v, 1.0 / np.sqrt(d))


def rope_softmax_quadratic(q, k, v, positions=None, base=10000.0):
    """Scaled dot-product attention on rotary-embedded queries and keys."""
    return quadratic_rsa(rope_apply(q, positions, base), rope_apply(k, positions, base), v)


# --------------------------------------------------------------------------
# multi-head wrapper


def param_shapes(cfg: AttentionConfig):
    d = cfg.dim
    shapes = {}
    for p in "qkvo":
        shapes[f"w{p}"] = (d, d)
        shapes[f"b{p}"] = (d,)
    if cfg.kind == "quadratic_rsa":
        shapes["rel"] = (2 * cfg.max_rel_distance + 1, cfg.heads, cfg.head_dim)
    return shapes


def core_macs(cfg: AttentionConfig, groups, n_len):
    """Multiply-accumulates of the attention core for ``groups`` sequences of length N (all heads)."""
    d = cfg.head_dim
    g = groups * cfg.heads
    if cfg.kind == "quadratic_rsa":
        return 3 * g * n_len * n_len * d
    if cfg.kind == "rope_softmax_quadratic":
        return 2 * g * n_len * n_len * d
    return 2 * g * n_len * d * d


def _needs_graph(*tensors):
    return ad.is_grad_enabled() and any(getattr(t, "requires_grad", False) for t in tensors)


def mhsa(x, cfg: AttentionConfig, weights):
    """Multi-head self-attention over x [B, N, dim]; ``weights`` maps names of :func:`param_shapes`."""
    x = ad.as_tensor(x)
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in weights:
            raise ValueError(f"mhsa: missing weight {name!r}")
        if tuple(weights[name].shape) != shape:
            raise ValueError(f"mhsa: weight {name!r} has shape {weights[name].shape}, expected {shape}")
    b, n, _ = x.shape
    h, dh = cfg.heads, cfg.head_dim

    def heads(t):
        return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    q = heads(ad.linear(x, weights["wq"], weights["bq"]))
    k = heads(ad.linear(x, weights["wk"], weights["bk"]))
    v = heads(ad.linear(x, weights["wv"], weights["bv"]))

    if _needs_graph(q, k, v, *(weights[name] for name in expected)):
        if cfg.kind == "quadratic_rsa":
            rel = gather_relative(weights["rel"], n, cfg.max_rel_distance).transpose(2, 0, 1, 3)
            o = quadratic_rsa(q, k, v, rel)
        elif cfg.kind == "linear_rsa":
            o = linear_rsa(q, k, v, base=cfg.rope_base)
        else:
            o = rope_softmax_quadratic(q, k, v, base=cfg.rope_base)
    else:
        o = Tensor(_fast_core(cfg, q.data, k.data, v.data, weights.get("rel")))
        ad.tally_macs(core_macs(cfg, b, n))
    o = o.transpose(0, 2, 1, 3).reshape(b, n, cfg.dim)
    return ad.linear(o, weights["wo"], weights["bo"])


def _fast_core(cfg, q, k, v, rel):
    b, h, n, dh = q.shape
    flat = (b * h, n, dh)
    if cfg.kind == "quadratic_rsa":
        table = np.ascontiguousarray(np.transpose(ad.as_tensor(rel).data, (1, 0, 2)), dtype=q.dtype)
        out = kernels.quadratic_rsa(q.reshape(flat), k.reshape(flat), v.reshape(flat), table, h,
                                    cfg.max_rel_distance)
        return out.reshape(q.shape)
    ang = rope_angles(np.arange(n), dh, cfg.rope_base)
    cos, sin = np.cos(ang).astype(q.dtype), np.sin(ang).astype(q.dtype)
    qr, kr = _rotate(q, cos, sin), _rotate(k, cos, sin)
    if cfg.kind == "linear_rsa":
        out = kernels.linear_rsa(qr.reshape(flat), kr.reshape(flat), v.reshape(flat))
    else:
        zero = np.zeros((1, 1, dh), dtype=q.dtype)
        out = kernels.quadratic_rsa(qr.reshape(flat), kr.reshape(flat), v.reshape(flat), zero, 1, 0)
    return out.reshape(q.shape)
