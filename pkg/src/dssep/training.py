"""Loss, AdamW with stepwise exponential decay, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from . import dsp
from .model import ModelConfig, forward, init_weights
from .scene import read_manifest
from .signals import read_wav

log = logging.getLogger(__name__)

LOSS_TERMS = ("mag", "spec", "time")


class NumericalError(RuntimeError):
    """Non-finite loss or gradient."""


class DataError(RuntimeError):
    """Corpus or WAV read failure."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-8
    lr_decay: float = 0.999
    decay_every: int = 1000
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    batch: int = 4
    loss_weights: tuple = (0.9, 0.1, 0.2)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 100
    validate_every: int = 200
    val_fraction: float = 0.1
    segment_seconds: float = 3.0
    indoor_outdoor: tuple = None  # e.g. (60, 40) to subsample the manifest
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(x) for x in self.loss_weights))
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ValueError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.indoor_outdoor is not None:
            object.__setattr__(self, "indoor_outdoor", tuple(int(x) for x in self.indoor_outdoor))

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        if self.indoor_outdoor is not None:
            d["indoor_outdoor"] = list(self.indoor_outdoor)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# loss


@dataclass
class Target:
    """Reference for one head: compressed spectrogram parts [B, T, F] and waveform [B, L]."""

    real: np.ndarray
    imag: np.ndarray
    wave: np.ndarray

    @classmethod
    def from_wave(cls, wave, cfg: ModelConfig = None, dtype=np.float64):
        cfg = cfg or ModelConfig()
        wave = np.atleast_2d(np.asarray(wave, dtype=np.float64))
        spec = dsp.compress(dsp.stft(wave, cfg.fft, cfg.hop), cfg.compress_exp)
        return cls(spec.real.astype(dtype), spec.imag.astype(dtype), wave.astype(dtype))


_MAG_EPS = 1e-12


def _magnitude(real, imag):
    # eps keeps the gradient finite at zero; equal inputs still give equal outputs
    return ad.sqrt(real * real + imag * imag + _MAG_EPS)


def _mse(a, b):
    d = a - b
    return ad.reduce_mean(d * d)


def head_loss(pred, target: Target):
    """(mag, spec, time) loss terms for one head."""
    if pred.wave.shape != target.wave.shape:
        raise ValueError(f"prediction length {pred.wave.shape} != target length {target.wave.shape}")
    if pred.real.shape != target.real.shape:
        raise ValueError(f"prediction spectrogram {pred.real.shape} != target {target.real.shape}")
    mag = _mse(_magnitude(pred.real, pred.imag), _magnitude(ad.as_tensor(target.real), ad.as_tensor(target.imag)))
    spec = _mse(pred.real, target.real) + _mse(pred.imag, target.imag)
    time_term = ad.reduce_mean(ad.absolute(pred.wave - target.wave))
    return mag, spec, time_term


def dss_loss(pred_near, pred_far, target_near: Target, target_far: Target, weights=(0.9, 0.1, 0.2)):
    """Weighted mag/spec/time loss summed over both heads.

    Returns the scalar total (a graph node) and a dict of float components
    named ``{near,far}_{mag,spec,time}``.
    """
    total = None
    parts = {}
    for head, pred, target in (("near", pred_near, target_near), ("far", pred_far, target_far)):
        terms = head_loss(pred, target)
        for name, w, term in zip(LOSS_TERMS, weights, terms):
            parts[f"{head}_{name}"] = float(term.data)
            contrib = ad.scale(term, w)
            total = contrib if total is None else total + contrib
    return total, parts


# --------------------------------------------------------------------------
# optimiser


def learning_rate(step, cfg: TrainConfig):
    """lr0 * decay ** floor(step / decay_every)."""
    return cfg.lr * cfg.lr_decay ** (step // cfg.decay_every)


def init_optimizer(weights):
    return {"m": {k: np.zeros_like(v) for k, v in weights.items()},
            "v": {k: np.zeros_like(v) for k, v in weights.items()}}


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(factor)
    return norm


def check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name!r}; step aborted")


def adamw_step(weights, grads, state, cfg: TrainConfig, step):
    """One decoupled-weight-decay Adam update at 0-based ``step``; returns (weights, state).

    Inputs are not modified.  Any non-finite gradient aborts the step with
    :class:`NumericalError` before anything is updated.
    """
    check_finite(grads)
    lr = learning_rate(step, cfg)
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        m = cfg.beta1 * state["m"][name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state["v"][name] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        nw = w * (1.0 - lr * cfg.weight_decay) - lr * update
        new_w[name] = nw.astype(w.dtype)
        new_m[name] = m.astype(w.dtype)
        new_v[name] = v.astype(w.dtype)
    return new_w, {"m": new_m, "v": new_v}


# --------------------------------------------------------------------------
# data


@dataclass
class Example:
    id: str
    mixture: np.ndarray
    near: np.ndarray
    far: np.ndarray
    meta: dict = field(default_factory=dict)


def _read(path):
    try:
        wave = read_wav(path)
    except (OSError, ValueError, EOFError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return wave


def load_examples(records):
    examples = []
    for rec in records:
        root = Path(rec.get("root", "."))
        try:
            files = rec["files"]
            waves = [_read(root / files[k]) for k in ("mixture", "near", "far")]
        except KeyError as exc:
            raise DataError(f"manifest record {rec.get('id', '?')} lacks field {exc}") from None
        if len({w.shape[0] for w in waves}) != 1:
            raise DataError(f"scene {rec.get('id')}: mixture/near/far lengths differ")
        examples.append(Example(rec.get("id", str(len(examples))), *waves, meta=rec))
    return examples


def select_records(records, ratio=None):
    """Keep the manifest order; with ``ratio=(a, b)`` subsample to an a:b indoor:outdoor mix."""
    if not ratio:
        return list(records)
    indoor = [r for r in records if r.get("env") == "indoor"]
    outdoor = [r for r in records if r.get("env") == "outdoor"]
    a, b = ratio
    if a == 0:
        return outdoor
    if b == 0:
        return indoor
    n_in = min(len(indoor), len(outdoor) * a // b)
    n_out = min(len(outdoor), n_in * b // a)
    keep = {id(r) for r in indoor[:n_in] + outdoor[:n_out]}
    return [r for r in records if id(r) in keep]


def split_train_val(records, fraction, seed):
    if fraction <= 0 or len(records) < 10:
        return list(records), []
    order = np.random.default_rng([seed, 1]).permutation(len(records))
    n_val = max(1, int(round(len(records) * fraction)))
    val_idx = set(order[:n_val].tolist())
    return ([r for i, r in enumerate(records) if i not in val_idx],
            [r for i, r in enumerate(records) if i in val_idx])


def batch_indices(step, n_items, batch, seed):
    """Dataset indices for ``step``; epochs are seeded permutations so any step is reproducible."""
    out = []
    for slot in range(batch):
        pos = step * batch + slot
        epoch, offset = divmod(pos, n_items)
        perm = np.random.default_rng([seed, 0, epoch]).permutation(n_items)
        out.append(int(perm[offset]))
    return out


def make_batch(examples, indices, segment, seed, step, dtype):
    mix, near, far = [], [], []
    for slot, i in enumerate(indices):
        ex = examples[i]
        n = ex.mixture.shape[0]
        seg = min(segment, n)
        start = 0
        if n > seg:
            start = int(np.random.default_rng([seed, 2, step, slot]).integers(0, n - seg + 1))
        sl = slice(start, start + seg)
        mix.append(ex.mixture[sl])
        near.append(ex.near[sl])
        far.append(ex.far[sl])
    lengths = {m.shape[0] for m in mix}
    if len(lengths) != 1:
        seg = min(lengths)
        mix, near, far = ([a[:seg] for a in arrs] for arrs in (mix, near, far))
    return (np.stack(mix).astype(dtype), np.stack(near).astype(dtype), np.stack(far).astype(dtype))


# --------------------------------------------------------------------------
# loop


def loss_and_grads(weights, mixture, near, far, mcfg: ModelConfig, loss_weights):
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in weights.items()}
    est = forward(mixture, mcfg, params)
    dtype = params["enc.in.w"].dtype
    t_near = Target.from_wave(near, mcfg, dtype)
    t_far = Target.from_wave(far, mcfg, dtype)
    total, parts = dss_loss(est["near"], est["far"], t_near, t_far, loss_weights)
    value = float(total.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    total.backward()
    grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
    return value, parts, grads


def evaluate_loss(weights, examples, mcfg, tcfg):
    if not examples:
        return None
    dtype = np.dtype(tcfg.dtype)
    seg = int(round(tcfg.segment_seconds * dsp.SAMPLE_RATE))
    total = 0.0
    with ad.no_grad():
        for ex in examples:
            n = min(seg, ex.mixture.shape[0])
            mix, near, far = (np.asarray(a[:n], dtype=dtype)[None] for a in (ex.mixture, ex.near, ex.far))
            w = {k: ad.Tensor(v) for k, v in weights.items()}
            est = forward(mix, mcfg, w)
            loss, _ = dss_loss(est["near"], est["far"], Target.from_wave(near, mcfg, dtype),
                               Target.from_wave(far, mcfg, dtype), tcfg.loss_weights)
            total += float(loss.data)
    return total / len(examples)


@dataclass
class TrainResult:
    weights: dict
    optimizer: dict
    step: int
    history: list
    checkpoint: Path = None


def _write_jsonl(fh, record):
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def _truncate_log(path, keep_below):
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines()
            if line.strip() and json.loads(line)["step"] < keep_below]
    ckpt_io.atomic_write_bytes(path, "".join(line + "\n" for line in kept).encode())


def train(manifest, mcfg: ModelConfig, tcfg: TrainConfig, out_dir, resume=None, examples=None,
          init=None, callback=None):
    """Train from a manifest (or preloaded ``examples``); writes logs and checkpoints under ``out_dir``.

    Files: ``metrics.jsonl`` (one deterministic record per step plus
    validation records), ``timing.jsonl`` (wall-clock per step),
    ``checkpoint.dssf`` (latest) and ``ckpt_{step}.dssf`` every
    ``checkpoint_every`` steps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(tcfg.dtype)
    val_examples = []
    if examples is None:
        records = select_records(read_manifest(manifest), tcfg.indoor_outdoor)
        if not records:
            raise DataError(f"manifest {manifest} selects no scenes")
        train_recs, val_recs = split_train_val(records, tcfg.val_fraction, tcfg.seed)
        examples = load_examples(train_recs)
        val_examples = load_examples(val_recs)
    if not examples:
        raise DataError("no training examples")

    start = 0
    if resume is not None:
        rcfg, weights, ck = ckpt_io.load_model(resume)
        if rcfg != mcfg:
            raise ValueError(f"checkpoint {resume} was trained with a different model config")
        weights = {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}
        state = ck.optimizer or init_optimizer(weights)
        state = {k: {n: np.asarray(a, dtype=dtype) for n, a in d.items()} for k, d in state.items()}
        start = ck.step
    else:
        weights = init if init is not None else init_weights(mcfg, seed=tcfg.seed, dtype=dtype)
        weights = {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}
        state = init_optimizer(weights)

    metrics_path, timing_path = out_dir / "metrics.jsonl", out_dir / "timing.jsonl"
    for p in (metrics_path, timing_path):
        if resume is None and p.exists():
            p.unlink()
        _truncate_log(p, start)
    meta = {"train": tcfg.to_dict()}
    segment = int(round(tcfg.segment_seconds * dsp.SAMPLE_RATE))
    history = []
    last_ckpt = None
    t0 = time.perf_counter()
    with open(metrics_path, "a") as mfh, open(timing_path, "a") as tfh:
        for step in range(start, tcfg.steps):
            idx = batch_indices(step, len(examples), tcfg.batch, tcfg.seed)
            mix, near, far = make_batch(examples, idx, segment, tcfg.seed, step, dtype)
            value, parts, grads = loss_and_grads(weights, mix, near, far, mcfg, tcfg.loss_weights)
            check_finite(grads)
            norm = clip_gradients(grads, tcfg.clip_norm)
            lr = learning_rate(step, tcfg)
            weights, state = adamw_step(weights, grads, state, tcfg, step)
            record = {"step": step, "lr": lr, "loss": value, "grad_norm": norm, **parts}
            history.append(record)
            _write_jsonl(mfh, record)
            _write_jsonl(tfh, {"step": step, "wall_s": round(time.perf_counter() - t0, 4)})
            if callback is not None:
                callback(record)
            done = step + 1
            if tcfg.validate_every and val_examples and done % tcfg.validate_every == 0:
                val = evaluate_loss(weights, val_examples, mcfg, tcfg)
                _write_jsonl(mfh, {"step": step, "kind": "validation", "val_loss": val})
                log.info("step %d validation loss %.5f", done, val)
            if tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
                last_ckpt = out_dir / f"ckpt_{done:06d}.dssf"
                ckpt_io.save_model(last_ckpt, mcfg, weights, done, state, meta)
            if step % 50 == 0:
                log.info("step %d loss %.5f lr %.6f", step, value, lr)
    final = out_dir / "checkpoint.dssf"
    ckpt_io.save_model(final, mcfg, weights, max(start, tcfg.steps), state, meta)
    return TrainResult(weights, state, max(start, tcfg.steps), history, final)
