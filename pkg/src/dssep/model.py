"""Dual-head near/far separator: DenseNet encoder, TS-Conformer blocks, mask + complex decoders.

Feature maps are channels-last, ``[B, T, F, C]``.  The network works on the
power-law compressed spectrogram with the Nyquist bin dropped (256 bins),
halves frequency once in the encoder (128 bins), and restores 256 bins in
each decoder with a sub-pixel shuffle.  A learned projection of the last
decoded bin re-appends the Nyquist bin.

Each head returns ``mask * Y + complex`` in the compressed domain; the near
head reads the output of block ``blocks // 2`` (block 2 of 4), the far head
reads the last block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import attention, dsp
from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("baseline_quadratic", "proposed_linear", "enc_dec_only", "roformer")
VARIANT_ALIASES = {
    "baseline": "baseline_quadratic",
    "proposed": "proposed_linear",
    "encdec": "enc_dec_only",
    "roformer": "roformer",
}
ATTENTION_KIND = {
    "baseline_quadratic": "quadratic_rsa",
    "proposed_linear": "linear_rsa",
    "roformer": "rope_softmax_quadratic",
}
HEADS = ("near", "far")
PATHS = ("mask", "cplx")
PATH_CHANNELS = {"mask": 1, "cplx": 2}
STAGES = ("time", "freq")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "proposed_linear"
    channels: int = 48
    blocks: int = 4
    heads: int = 4
    fft: int = dsp.FFT_SIZE
    hop: int = dsp.HOP
    compress_exp: float = dsp.COMPRESS_EXPONENT
    depthwise_kernel: int = 15
    densenet_dilations: tuple = (1, 2, 4, 8)
    ffn_mult: int = 4
    max_rel_distance: int = 64
    rope_base: float = 10000.0
    reduced: bool = False  # desk-scale configs may use fewer than 4 blocks

    def __post_init__(self):
        variant = VARIANT_ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        object.__setattr__(self, "densenet_dilations", tuple(int(d) for d in self.densenet_dilations))
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if variant != "enc_dec_only":
            if self.blocks < 1:
                raise ValueError("at least one TS-Conformer block is required")
            if self.blocks != 4 and not self.reduced:
                raise ValueError(f"full variants use 4 blocks, got {self.blocks} (set reduced=true for desk-scale runs)")
        if self.fft % 4 or self.fft // 2 % 2:
            raise ValueError(f"fft size {self.fft} must be a multiple of 4")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError(f"depthwise kernel must be odd, got {self.depthwise_kernel}")
        if not 0.0 < self.compress_exp <= 1.0:
            raise ValueError(f"compression exponent must lie in (0, 1], got {self.compress_exp}")

    @property
    def n_blocks(self):
        return 0 if self.variant == "enc_dec_only" else self.blocks

    @property
    def near_block(self):
        return max(1, self.n_blocks // 2) if self.n_blocks else 0

    @property
    def freq_bins(self):
        return self.fft // 2 + 1

    @property
    def attention(self):
        return attention.AttentionConfig(
            dim=self.channels,
            heads=self.heads,
            kind=ATTENTION_KIND.get(self.variant, "linear_rsa"),
            max_rel_distance=self.max_rel_distance,
            rope_base=self.rope_base,
        )

    def to_dict(self):
        d = asdict(self)
        d["densenet_dilations"] = list(self.densenet_dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# parameter layout


def _norm(prefix, c):
    return {f"{prefix}.g": (c,), f"{prefix}.b": (c,)}


def _densenet_shapes(prefix, c, dilations):
    shapes = {}
    for i, _ in enumerate(dilations):
        p = f"{prefix}.{i}"
        shapes[f"{p}.w"] = (2, 3, c * (i + 1), c)
        shapes[f"{p}.b"] = (c,)
        shapes.update(_norm(f"{p}.ln", c))
        shapes[f"{p}.a"] = (c,)
    shapes[f"{prefix}.out.w"] = (1, 1, c * (len(dilations) + 1), c)
    shapes[f"{prefix}.out.b"] = (c,)
    return shapes


def _ffn_shapes(prefix, c, mult):
    shapes = _norm(f"{prefix}.ln", c)
    shapes.update({f"{prefix}.w1": (c, mult * c), f"{prefix}.b1": (mult * c,),
                   f"{prefix}.w2": (mult * c, c), f"{prefix}.b2": (c,)})
    return shapes


def _stage_shapes(prefix, cfg):
    c = cfg.channels
    shapes = {}
    att = {f"{prefix}.att.{k}": s for k, s in attention.param_shapes(cfg.attention).items()}
    if cfg.variant == "roformer":
        shapes.update(_norm(f"{prefix}.att.ln", c))
        shapes.update(att)
        shapes.update(_ffn_shapes(f"{prefix}.ffn", c, cfg.ffn_mult))
        return shapes
    shapes.update(_ffn_shapes(f"{prefix}.ffn1", c, cfg.ffn_mult))
    shapes.update(_norm(f"{prefix}.att.ln", c))
    shapes.update(att)
    shapes.update(_norm(f"{prefix}.conv.ln1", c))
    shapes.update({f"{prefix}.conv.pw1.w": (c, 2 * c), f"{prefix}.conv.pw1.b": (2 * c,),
                   f"{prefix}.conv.dw.w": (cfg.depthwise_kernel, 1, 1, c), f"{prefix}.conv.dw.b": (c,)})
    shapes.update(_norm(f"{prefix}.conv.ln2", c))
    shapes.update({f"{prefix}.conv.pw2.w": (c, c), f"{prefix}.conv.pw2.b": (c,)})
    shapes.update(_ffn_shapes(f"{prefix}.ffn2", c, cfg.ffn_mult))
    shapes.update(_norm(f"{prefix}.ln", c))
    return shapes


def param_shapes(cfg: ModelConfig):
    """Ordered mapping of every weight name to its shape."""
    c = cfg.channels
    shapes = {"enc.in.w": (1, 1, 3, c), "enc.in.b": (c,)}
    shapes.update(_norm("enc.in.ln", c))
    shapes["enc.in.a"] = (c,)
    shapes.update(_densenet_shapes("enc.dense", c, cfg.densenet_dilations))
    shapes.update({"enc.down.w": (1, 3, c, c), "enc.down.b": (c,)})
    shapes.update(_norm("enc.down.ln", c))
    shapes["enc.down.a"] = (c,)
    for b in range(cfg.n_blocks):
        for stage in STAGES:
            shapes.update(_stage_shapes(f"blk{b}.{stage}", cfg))
    bins = cfg.fft // 2
    for head in HEADS:
        for path in PATHS:
            p = f"dec.{head}.{path}"
            k = PATH_CHANNELS[path]
            shapes.update(_densenet_shapes(f"{p}.dense", c, cfg.densenet_dilations))
            shapes.update({f"{p}.up.w": (1, 3, c, 2 * c), f"{p}.up.b": (2 * c,)})
            shapes.update(_norm(f"{p}.up.ln", c))
            shapes[f"{p}.up.a"] = (c,)
            shapes.update({f"{p}.out.w": (1, 1, c, k), f"{p}.out.b": (k,)})
            shapes.update({f"{p}.nyq.w": (c, k), f"{p}.nyq.b": (k,)})
            if path == "mask":
                shapes[f"{p}.out.a"] = (bins + 1, 1)
    return shapes


def init_weights(cfg: ModelConfig, seed=0, dtype=np.float32):
    """Deterministic initialisation: uniform fan-in scaling, unit norms, PReLU slope 0.25."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".ln.g") or leaf == "g":
            arr = np.ones(shape)
        elif leaf == "a":
            arr = np.full(shape, 0.25)
        elif name.endswith("att.rel"):
            arr = rng.normal(0.0, 0.02, shape)
        elif leaf.startswith("w"):
            fan_in = int(np.prod(shape[:-1]))
            if name.endswith("conv.dw.w"):
                fan_in = shape[0]
            bound = np.sqrt(3.0 / fan_in)
            arr = rng.uniform(-bound, bound, shape)
        else:
            arr = np.zeros(shape)
        weights[name] = arr.astype(dtype)
    # the mask path starts near the identity mapping so early training is stable
    for head in HEADS:
        weights[f"dec.{head}.mask.out.b"][:] = 0.5
        weights[f"dec.{head}.mask.nyq.b"][:] = 0.5
    return weights


def identity_weights(cfg: ModelConfig, near_mask=1.0, far_mask=0.0, dtype=np.float64):
    """Weights whose heads output ``near_mask * Y`` and ``far_mask * Y`` exactly (complex path zero)."""
    weights = {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg).items()}
    for name in weights:
        if name.endswith(".g"):
            weights[name][:] = 1.0
    for head, value in (("near", near_mask), ("far", far_mask)):
        weights[f"dec.{head}.mask.out.b"][:] = value
        weights[f"dec.{head}.mask.nyq.b"][:] = value
        weights[f"dec.{head}.mask.out.a"][:] = 1.0
    return weights


def check_weights(cfg: ModelConfig, weights):
    shapes = param_shapes(cfg)
    missing = [n for n in shapes if n not in weights]
    if missing:
        raise ValueError(f"missing weight(s): {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    extra = [n for n in weights if n not in shapes]
    if extra:
        raise ValueError(f"unexpected weight(s): {extra[:5]}")
    for name, shape in shapes.items():
        if tuple(weights[name].shape) != shape:
            raise ValueError(f"weight {name!r} has shape {tuple(weights[name].shape)}, expected {shape}")


def count_parameters(cfg: ModelConfig):
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


# --------------------------------------------------------------------------
# building blocks


def _ln_prelu(x, w, prefix):
    return ad.prelu(ad.layer_norm(x, w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"]), w[f"{prefix}.a"])


def densenet(x, w, prefix, dilations):
    """Time-dilated dense blocks (kernel 2x3, causal in time) then a 1x1 bottleneck."""
    skip = x
    for i, d in enumerate(dilations):
        p = f"{prefix}.{i}"
        out = ad.conv2d(skip, w[f"{p}.w"], w[f"{p}.b"], dilation=(d, 1), padding=((d, 0), (1, 1)))
        out = _ln_prelu(out, w, p)
        skip = ad.concat([out, skip], axis=-1)
    return ad.conv2d(skip, w[f"{prefix}.out.w"], w[f"{prefix}.out.b"])


def input_features(spec_compressed: dsp.ComplexSpectrogram, dtype=np.float32):
    """[..., T, F] compressed spectrogram -> [B, T, F-1, 3] (re, im, mag; Nyquist dropped)."""
    re, im = spec_compressed.real, spec_compressed.imag
    if re.ndim == 2:
        re, im = re[None], im[None]
    feats = np.stack([re, im, np.hypot(re, im)], axis=-1)[..., :-1, :]
    return feats.astype(dtype)


def encode(features, w, cfg: ModelConfig):
    """[B, T, F, 3] -> [B, T, F/2, C]; time resolution is preserved."""
    features = ad.as_tensor(features)
    if features.ndim != 4 or features.shape[-1] != 3:
        raise ValueError(f"encoder expects [B, T, F, 3] features, got {features.shape}")
    x = ad.conv2d(features, w["enc.in.w"], w["enc.in.b"])
    x = _ln_prelu(x, w, "enc.in")
    x = densenet(x, w, "enc.dense", cfg.densenet_dilations)
    x = ad.conv2d(x, w["enc.down.w"], w["enc.down.b"], stride=(1, 2), padding=((0, 0), (1, 1)))
    return _ln_prelu(x, w, "enc.down")


def _ffn(x, w, prefix):
    h = ad.layer_norm(x, w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"])
    h = ad.swish(ad.linear(h, w[f"{prefix}.w1"], w[f"{prefix}.b1"]))
    return ad.linear(h, w[f"{prefix}.w2"], w[f"{prefix}.b2"])


def _attention(x, w, prefix, cfg):
    att_cfg = cfg.attention
    h = ad.layer_norm(x, w[f"{prefix}.att.ln.g"], w[f"{prefix}.att.ln.b"])
    sub = {k: w[f"{prefix}.att.{k}"] for k in attention.param_shapes(att_cfg)}
    return attention.mhsa(h, att_cfg, sub)


def _conv_module(x, w, prefix, cfg):
    g, n, c = x.shape
    h = ad.layer_norm(x, w[f"{prefix}.ln1.g"], w[f"{prefix}.ln1.b"])
    h = ad.linear(h, w[f"{prefix}.pw1.w"], w[f"{prefix}.pw1.b"])
    a, gate = ad.split(h, [c, c], axis=-1)
    h = a * ad.sigmoid(gate)
    half = cfg.depthwise_kernel // 2
    h = ad.conv2d(h.reshape(g, n, 1, c), w[f"{prefix}.dw.w"], w[f"{prefix}.dw.b"],
                  padding=((half, half), (0, 0)), groups=c).reshape(g, n, c)
    h = ad.swish(ad.layer_norm(h, w[f"{prefix}.ln2.g"], w[f"{prefix}.ln2.b"]))
    return ad.linear(h, w[f"{prefix}.pw2.w"], w[f"{prefix}.pw2.b"])


def conformer(x, w, prefix, cfg):
    """Conformer over sequences x [G, N, C]."""
    if cfg.variant == "roformer":
        x = x + _attention(x, w, prefix, cfg)
        return x + _ffn(x, w, f"{prefix}.ffn")
    x = x + ad.scale(_ffn(x, w, f"{prefix}.ffn1"), 0.5)
    x = x + _attention(x, w, prefix, cfg)
    x = x + _conv_module(x, w, f"{prefix}.conv", cfg)
    x = x + ad.scale(_ffn(x, w, f"{prefix}.ffn2"), 0.5)
    return ad.layer_norm(x, w[f"{prefix}.ln.g"], w[f"{prefix}.ln.b"])


def ts_conformer_block(x, w, prefix, cfg):
    """Time-stage then frequency-stage conformer on x [B, T, F, C]; shape preserved."""
    b, t, f, c = x.shape
    seq = x.transpose(0, 2, 1, 3).reshape(b * f, t, c)
    seq = conformer(seq, w, f"{prefix}.time", cfg)
    x = seq.reshape(b, f, t, c).transpose(0, 2, 1, 3)
    seq = conformer(x.reshape(b * t, f, c), w, f"{prefix}.freq", cfg)
    return seq.reshape(b, t, f, c)


def decode_path(feats, w, prefix, cfg):
    """One decoder path: [B, T, F/2, C] -> [B, T, F+1, k] (k = 1 mask, 2 complex)."""
    x = densenet(feats, w, f"{prefix}.dense", cfg.densenet_dilations)
    x = ad.conv2d(x, w[f"{prefix}.up.w"], w[f"{prefix}.up.b"], padding=((0, 0), (1, 1)))
    x = ad.pixel_shuffle(x, 2)
    x = _ln_prelu(x, w, f"{prefix}.up")
    main = ad.conv2d(x, w[f"{prefix}.out.w"], w[f"{prefix}.out.b"])
    b, t, f, k = main.shape
    last = x[:, :, f - 1, :]
    nyq = ad.linear(last, w[f"{prefix}.nyq.w"], w[f"{prefix}.nyq.b"]).reshape(b, t, 1, k)
    out = ad.concat([main, nyq], axis=2)
    if f"{prefix}.out.a" in w:
        out = ad.prelu(out, w[f"{prefix}.out.a"])
    return out


def decode_head(feats, mix_real, mix_imag, w, head, cfg):
    """mask * Y + complex for one head; returns compressed (real, imag) [B, T, F+1]."""
    mask = decode_path(feats, w, f"dec.{head}.mask", cfg)
    cplx = decode_path(feats, w, f"dec.{head}.cplx", cfg)
    b, t, f, _ = mask.shape
    m = mask.reshape(b, t, f)
    c_re, c_im = ad.split(cplx, [1, 1], axis=-1)
    real = m * mix_real + c_re.reshape(b, t, f)
    imag = m * mix_imag + c_im.reshape(b, t, f)
    return real, imag


# --------------------------------------------------------------------------
# full model


@dataclass
class Estimate:
    """One head's output: compressed spectrogram parts [B, T, F] and waveform [B, L]."""

    real: Tensor
    imag: Tensor
    wave: Tensor
    extras: dict = field(default_factory=dict)


def _as_weights(weights):
    return {k: ad.as_tensor(v) for k, v in weights.items()}


def decompress_parts(real, imag, exponent):
    """Differentiable inverse power law on (real, imag) tensors."""
    energy = real * real + imag * imag
    factor = ad.power(energy, 0.5 * (1.0 / exponent - 1.0))
    return real * factor, imag * factor


def analyse(mixture, cfg: ModelConfig):
    """Compressed spectrogram of a [B, L] batch."""
    spec = dsp.stft(mixture, cfg.fft, cfg.hop)
    return dsp.compress(spec, cfg.compress_exp)


def forward(mixture, cfg: ModelConfig, weights, return_features=False):
    """Separate a waveform batch [B, L] (or [L]); returns {"near": Estimate, "far": Estimate}.

    The graph is differentiable with respect to any weight given as a
    :class:`Tensor` with ``requires_grad``.
    """
    mixture = np.asarray(mixture)
    if mixture.ndim == 1:
        mixture = mixture[None]
    if mixture.shape[-1] < cfg.fft:
        raise ValueError(f"mixture of {mixture.shape[-1]} samples is shorter than one frame ({cfg.fft})")
    w = _as_weights(weights)
    dtype = w["enc.in.w"].dtype
    length = mixture.shape[-1]
    spec = analyse(mixture, cfg)
    mix_re = Tensor(spec.real.astype(dtype))
    mix_im = Tensor(spec.imag.astype(dtype))
    x = encode(input_features(spec, dtype), w, cfg)
    taps = {0: x}
    for b in range(cfg.n_blocks):
        x = ts_conformer_block(x, w, f"blk{b}", cfg)
        taps[b + 1] = x
    sources = {"near": taps[cfg.near_block], "far": taps[cfg.n_blocks]}
    out = {}
    for head in HEADS:
        real, imag = decode_head(sources[head], mix_re, mix_im, w, head, cfg)
        lin_re, lin_im = decompress_parts(real, imag, cfg.compress_exp)
        wave = ad.istft(lin_re, lin_im, length, cfg.fft, cfg.hop)
        out[head] = Estimate(real, imag, wave)
    if return_features:
        out["features"] = taps
    return out


def separate(mixture, cfg: ModelConfig, weights):
    """Inference: (near_wave, far_wave) numpy arrays with the input's shape."""
    mixture = np.asarray(mixture)
    with ad.no_grad():
        est = forward(mixture, cfg, weights)
    near, far = est["near"].wave.data, est["far"].wave.data
    if mixture.ndim == 1:
        near, far = near[0], far[0]
    return near, far
