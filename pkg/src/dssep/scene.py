"""Acoustic scene sampling, image-source room impulse responses, and mixture rendering.

A scene places 0-3 near talkers (< 0.5 m from the microphone) and 0-3 far
talkers in a shoebox room.  Each dry source is convolved with its image-source
RIR; the near target is the sum of reverberant near sources and the far target
collects the reverberant far sources plus un-reverberated background noise.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from . import kernels
from .signals import SAMPLE_RATE, WavPool, synth_noise, synth_speech, write_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
DISTANCE_THRESHOLD = 0.5
SNR_LEVELS = (0, 5, 10, 15, 20)
ROOM_CENTER = (6.0, 6.0, 2.6)
ROOM_SPREAD = (1.5, 1.5, 0.2)
MIC_CENTER = (3.0, 3.0, 0.8)
MIC_SPREAD = (0.7, 0.7, 0.7)
RT60_RANGE = (0.15, 1.0)
NEAR_RANGE = (0.02, 0.5)
FAR_BANDS = {
    "SR": (1.3, 1.7),
    "UR0": (0.5, 0.8),
    "UR1": (0.8, 1.2),
    "UR2": (1.8, 2.2),
}
OUTDOOR_FLOOR_RANGE = (0.5, 0.99)
SEGMENT_SECONDS = {"train": 3.0, "eval": 5.0}
MAX_PLACEMENT_RETRIES = 10_000
HORIZON_RT60 = 1.0
WALL_MARGIN = 0.01


class PlacementError(RuntimeError):
    """A source could not be placed inside the room within the retry budget."""


class AbsorptionError(ValueError):
    """The requested RT60 needs an absorption coefficient above 1."""


class SilentSignalError(ValueError):
    pass


@dataclass(frozen=True)
class SourcePlacement:
    pos: tuple[float, float, float]
    distance_to_mic: float
    label: str

    @classmethod
    def at(cls, pos, mic):
        d = float(np.linalg.norm(np.subtract(pos, mic)))
        return cls(tuple(float(p) for p in pos), d, "near" if d < DISTANCE_THRESHOLD else "far")


@dataclass(frozen=True)
class SceneSpec:
    room_dims: tuple[float, float, float]
    mic_pos: tuple[float, float, float]
    rt60: float
    env: str
    near_sources: tuple[SourcePlacement, ...]
    far_sources: tuple[SourcePlacement, ...]
    snr_db: int
    seed: int
    far_band: str = "SR"
    floor_reflection: float | None = None

    @property
    def sources(self):
        return self.near_sources + self.far_sources

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("near_sources", "far_sources"):
            d[key] = tuple(
                SourcePlacement(tuple(s["pos"]), float(s["distance_to_mic"]), s["label"]) for s in d[key]
            )
        d["room_dims"] = tuple(d["room_dims"])
        d["mic_pos"] = tuple(d["mic_pos"])
        return cls(**d)


@dataclass(frozen=True)
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_index: int = 0


@dataclass
class MixtureSample:
    mixture: np.ndarray
    target_near: np.ndarray
    target_far: np.ndarray
    spec: SceneSpec
    duration_s: float
    extras: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# scene sampling


def _inside(pos, room, margin=WALL_MARGIN):
    return all(margin < p < r - margin for p, r in zip(pos, room))


def _place(rng, room, mic, lo, hi, what):
    for _ in range(MAX_PLACEMENT_RETRIES):
        d = rng.uniform(lo, hi)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        pos = np.asarray(mic) + d * u
        if _inside(pos, room):
            return SourcePlacement.at(pos, mic)
    raise PlacementError(
        f"{what} source at distance [{lo}, {hi}) m from mic {tuple(mic)} stays outside room "
        f"{tuple(room)} after {MAX_PLACEMENT_RETRIES} retries"
    )


def sample_scene(seed, env="indoor", far_band="SR", n_near=None, n_far=None) -> SceneSpec:
    """Draw a random scene; a pure function of its arguments.

    Source counts default to a uniform draw over the 15 (near, far) pairs in
    {0..3}^2 minus (0, 0).
    """
    if env not in ("indoor", "outdoor"):
        raise ValueError(f"env must be 'indoor' or 'outdoor', got {env!r}")
    if far_band not in FAR_BANDS:
        raise ValueError(f"unknown far band {far_band!r}; expected one of {sorted(FAR_BANDS)}")
    rng = np.random.default_rng(int(seed))
    room = rng.uniform(np.subtract(ROOM_CENTER, ROOM_SPREAD), np.add(ROOM_CENTER, ROOM_SPREAD))
    mic = rng.uniform(np.subtract(MIC_CENTER, MIC_SPREAD), np.add(MIC_CENTER, MIC_SPREAD))
    rt60 = float(rng.uniform(*RT60_RANGE))
    snr = int(rng.choice(SNR_LEVELS))
    pairs = [(a, b) for a in range(4) for b in range(4) if a + b > 0]
    pick = pairs[rng.integers(len(pairs))]
    n_near = pick[0] if n_near is None else int(n_near)
    n_far = pick[1] if n_far is None else int(n_far)
    if not (0 <= n_near <= 3 and 0 <= n_far <= 3 and n_near + n_far > 0):
        raise ValueError(f"invalid source counts near={n_near} far={n_far}")
    if not _inside(mic, room):
        raise PlacementError(f"microphone {tuple(mic)} outside room {tuple(room)}")
    near = tuple(_place(rng, room, mic, *NEAR_RANGE, "near") for _ in range(n_near))
    lo, hi = FAR_BANDS[far_band]
    far = tuple(_place(rng, room, mic, lo, hi, "far") for _ in range(n_far))
    floor = float(rng.uniform(*OUTDOOR_FLOOR_RANGE)) if env == "outdoor" else None
    return SceneSpec(
        room_dims=tuple(float(r) for r in room),
        mic_pos=tuple(float(m) for m in mic),
        rt60=rt60,
        env=env,
        near_sources=near,
        far_sources=far,
        snr_db=snr,
        seed=int(seed),
        far_band=far_band,
        floor_reflection=floor,
    )


# --------------------------------------------------------------------------
# image source model


def _decay_fit(energy, fs, start_db=-5.0, stop_db=-25.0):
    """RT60 from a line fit to the backward-integrated energy curve."""
    tail = np.cumsum(np.asarray(energy, dtype=np.float64)[::-1])[::-1]
    with np.errstate(divide="ignore"):
        edc = 10 * np.log10(tail / tail[0])
    i0 = int(np.argmax(edc <= start_db))
    i1 = int(np.argmax(edc <= stop_db))
    if i1 <= i0 + 1:
        return float("nan")
    t = np.arange(i0, i1) / fs
    slope = np.polyfit(t, edc[i0:i1], 1)[0]
    return -60.0 / slope


def image_horizon(spec: SceneSpec, c=SPEED_OF_SOUND):
    """Radius (m) of the image sphere: everything arriving within one RT60."""
    return c * spec.rt60 * HORIZON_RT60


def max_reflection_order(spec: SceneSpec):
    return 1 if spec.env == "outdoor" else None


def _axis_images(src, length, max_order, reach):
    """Per-axis image coordinates with hit counts on the wall at 0 and at ``length``."""
    span = max_order if max_order is not None else int(math.ceil(reach / (2 * length))) + 1
    m = np.arange(-span, span + 1)
    coord = np.concatenate([src + 2 * m * length, -src + 2 * m * length])
    low = np.concatenate([np.abs(m), np.abs(m - 1)])
    high = np.concatenate([np.abs(m), np.abs(m)])
    return coord, low, high


def image_lattice(room_dims, src_pos, mic_pos, radius=None, max_order=None):
    """Images within ``radius`` of the mic and/or with at most ``max_order`` reflections.

    Returns positions [K, 3] and wall hit counts [K, 6] ordered
    (x0, x1, y0, y1, floor, ceiling).
    """
    if radius is None and max_order is None:
        raise ValueError("need a radius or a max reflection order")
    reach = radius if radius is not None else 0.0
    (cx, lx, hx), (cy, ly, hy), (cz, lz, hz) = (
        _axis_images(src_pos[i], room_dims[i], max_order, reach) for i in range(3)
    )
    dy = (cy - mic_pos[1])[:, None] ** 2 + (cz - mic_pos[2])[None, :] ** 2
    oyz = (ly + hy)[:, None] + (lz + hz)[None, :]
    pos, hits = [], []
    for i in range(cx.size):
        ok = np.ones(dy.shape, dtype=bool)
        if radius is not None:
            ok &= dy + (cx[i] - mic_pos[0]) ** 2 <= radius * radius
        if max_order is not None:
            ok &= oyz + lx[i] + hx[i] <= max_order
        iy, iz = np.nonzero(ok)
        if iy.size == 0:
            continue
        pos.append(np.stack([np.full(iy.size, cx[i]), cy[iy], cz[iz]], axis=1))
        hits.append(np.stack([np.full(iy.size, lx[i]), np.full(iy.size, hx[i]),
                              ly[iy], hy[iy], lz[iz], hz[iz]], axis=1))
    return np.concatenate(pos), np.concatenate(hits)


def _lattice_for(spec, src_pos, max_order=None):
    if spec.env == "outdoor" or max_order is not None:
        order = max_order if max_order is not None else 1
        return image_lattice(spec.room_dims, src_pos, spec.mic_pos, max_order=order)
    return image_lattice(spec.room_dims, src_pos, spec.mic_pos, radius=image_horizon(spec))


@functools.lru_cache(maxsize=64)
def calibrate_reflection(spec: SceneSpec, fs=SAMPLE_RATE, c=SPEED_OF_SOUND):
    """Uniform wall reflection coefficient whose image-lattice decay hits ``spec.rt60``.

    Uses the lattice of a source at the microphone minus the direct path.
    Its energy envelope
    sum(beta^(2 k) / (4 pi d)^2) is binned per sample and put through the
    Schroeder line fit; beta is found by bisection (the fitted RT60 grows
    monotonically with beta).  Sabine/Eyring inversions miss by tens of percent
    because the shoebox lattice is far from a diffuse field.
    """
    mic = np.asarray(spec.mic_pos, dtype=np.float64)
    pos, hits = _lattice_for(spec, mic)
    order = hits.sum(axis=1)
    pos, order = pos[order > 0], order[order > 0]
    if order.size < 2:
        raise AbsorptionError(
            f"rt60={spec.rt60:.3f} s is shorter than the first reflections of room {tuple(spec.room_dims)}")
    dist = np.linalg.norm(pos - mic, axis=1)
    bins = np.rint(dist / c * fs).astype(np.int64)
    spread = 1.0 / (4 * np.pi * dist) ** 2
    n_bins = int(bins.max()) + 1
    # per-order energy histograms turn each bisection step into one mat-vec
    hist = np.zeros((int(order.max()) + 1, n_bins))
    np.add.at(hist, (order, bins), spread)
    orders = np.arange(hist.shape[0])

    def fitted(beta):
        rt = _decay_fit((beta ** (2 * orders)) @ hist, fs)
        return 0.0 if np.isnan(rt) else rt  # decays past the fit window within a sample

    lo, hi = 0.02, 0.9995
    rt_lo, rt_hi = fitted(lo), fitted(hi)
    if not (rt_lo <= spec.rt60 <= rt_hi):
        bound = 1 - lo ** 2 if spec.rt60 < rt_lo else 1 - hi ** 2
        raise AbsorptionError(
            f"rt60={spec.rt60:.3f} s unattainable in room {tuple(spec.room_dims)} "
            f"(reachable {rt_lo:.3f}-{rt_hi:.3f} s); needs wall absorption beyond {bound:.4f}"
        )
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if fitted(mid) < spec.rt60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def wall_reflections(spec: SceneSpec):
    """Pressure reflection coefficients for walls (x0, x1, y0, y1, floor, ceiling)."""
    if spec.env == "outdoor":
        beta = np.zeros(6)
        beta[4] = 0.0 if spec.floor_reflection is None else spec.floor_reflection
        return beta
    return np.full(6, calibrate_reflection(spec))


def image_sources(spec: SceneSpec, src_pos, max_order=None, beta=None):
    """Image positions and reflection gains (before 1/(4 pi d)); silent images dropped."""
    if beta is None:
        beta = wall_reflections(spec)
    pos, hits = _lattice_for(spec, np.asarray(src_pos, dtype=np.float64), max_order)
    gain = np.prod(np.power(np.asarray(beta)[None, :], hits), axis=1)
    keep = gain > 0.0
    return pos[keep], gain[keep]


def compute_rir(spec: SceneSpec, src: SourcePlacement, source_index=0, fs=SAMPLE_RATE,
                c=SPEED_OF_SOUND, max_order=None, beta=None) -> ImpulseResponse:
    """Image-source RIR: 1/(4 pi d) spherical spreading, wall products, windowed-sinc delays."""
    if not _inside(src.pos, spec.room_dims, margin=0.0):
        raise PlacementError(f"source {src.pos} outside room {spec.room_dims}")
    pos, gain = image_sources(spec, np.asarray(src.pos, dtype=np.float64), max_order, beta)
    dist = np.linalg.norm(pos - np.asarray(spec.mic_pos), axis=1)
    delays = dist / c * fs
    amps = gain / (4 * np.pi * dist)
    length = int(math.ceil(delays.max())) + kernels.ISM_HALF_TAPS + 1
    h = kernels.ism_accumulate(delays, amps, length)
    if spec.env == "indoor":
        h = allen_berkley_highpass(h, fs)
    return ImpulseResponse(samples=h, sample_rate=fs, source_index=source_index)


def allen_berkley_highpass(h, fs=SAMPLE_RATE, cutoff=100.0):
    """Removes the DC build-up of dense positive image trains (Allen & Berkley's 100 Hz filter)."""
    w = 2 * np.pi * cutoff / fs
    r1 = math.exp(-w)
    return lfilter([1.0, -(1.0 + r1), r1], [1.0, -2 * r1 * math.cos(w), r1 * r1], h)


def schroeder_curve(h):
    """Backward-integrated energy decay curve in dB (0 dB at t=0)."""
    energy = np.cumsum(np.asarray(h, dtype=np.float64)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def estimate_rt60(h, fs=SAMPLE_RATE, start_db=-5.0, stop_db=-25.0):
    """RT60 by line fit to the Schroeder curve between ``start_db`` and ``stop_db``."""
    edc = schroeder_curve(h)
    i0 = int(np.argmax(edc <= start_db))
    i1 = int(np.argmax(edc <= stop_db))
    if i1 <= i0 + 1:
        raise ValueError("decay curve does not span the fit range")
    t = np.arange(i0, i1) / fs
    slope = np.polyfit(t, edc[i0:i1], 1)[0]
    return -60.0 / slope


# --------------------------------------------------------------------------
# rendering


def _power(x):
    return float(np.mean(np.square(x, dtype=np.float64)))


def render_scene(spec: SceneSpec, dry_signals, noise, duration_s=None, n_samples=None,
                 rirs=None) -> MixtureSample:
    """Convolve dry sources with their RIRs and add noise at ``spec.snr_db``.

    ``dry_signals`` follows ``spec.sources`` order (near first, then far).
    Output waveforms are float32 and satisfy mixture == near + far exactly.
    """
    if n_samples is None:
        if duration_s is None:
            raise ValueError("give duration_s or n_samples")
        n_samples = int(round(duration_s * SAMPLE_RATE))
    sources = spec.sources
    if len(dry_signals) != len(sources):
        raise ValueError(f"{len(dry_signals)} dry signals for {len(sources)} sources")
    if len(noise) < n_samples:
        raise ValueError(f"noise has {len(noise)} samples, segment needs {n_samples}")
    if rirs is None:
        rirs = [compute_rir(spec, s, i) for i, s in enumerate(sources)]
    near = np.zeros(n_samples)
    far = np.zeros(n_samples)
    for i, (src, dry, rir) in enumerate(zip(sources, dry_signals, rirs)):
        dry = np.asarray(dry, dtype=np.float64)
        if not np.any(dry):
            raise SilentSignalError(f"dry signal for source {i} ({src.label}) is silent")
        wet = fftconvolve(dry, rir.samples)[:n_samples]
        target = near if src.label == "near" else far
        target[: wet.shape[0]] += wet
    eps = np.asarray(noise[:n_samples], dtype=np.float64)
    p_src = _power(near + far)
    p_noise = _power(eps)
    if p_noise == 0.0:
        raise SilentSignalError("background noise is silent")
    if p_src == 0.0:
        raise SilentSignalError("reverberant sources are silent over the segment")
    eps = eps * math.sqrt(p_src / (p_noise * 10 ** (spec.snr_db / 10)))
    target_near = near.astype(np.float32)
    target_far = (far + eps).astype(np.float32)
    mixture = target_near + target_far
    return MixtureSample(
        mixture=mixture,
        target_near=target_near,
        target_far=target_far,
        spec=spec,
        duration_s=n_samples / SAMPLE_RATE,
        extras={"noise": eps.astype(np.float32), "reverberant_sources": (near + far).astype(np.float32)},
    )


# --------------------------------------------------------------------------
# corpus generation


def scene_seed(master_seed, index, stream=0):
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index), int(stream)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_counts(count, ratio):
    """Indoor/outdoor allocation; flooring the outdoor share gives the remainder to indoor."""
    indoor_pct, outdoor_pct = ratio
    if indoor_pct < 0 or outdoor_pct < 0 or indoor_pct + outdoor_pct != 100:
        raise ValueError(f"mix ratio must be two non-negative numbers summing to 100, got {ratio}")
    n_out = (count * outdoor_pct) // 100
    return count - n_out, n_out


def parse_ratio(text):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise ValueError(f"ratio must look like 60:40, got {text!r}")
    return int(parts[0]), int(parts[1])


def _scene_job(args):
    (index, env, split, master_seed, far_band, counts, speech_dir, noise_dir, out_dir) = args
    seed = scene_seed(master_seed, index, 0)
    n_near, n_far = counts if counts is not None else (None, None)
    spec = sample_scene(seed, env=env, far_band=far_band, n_near=n_near, n_far=n_far)
    n = int(round(SEGMENT_SECONDS[split] * SAMPLE_RATE))
    rng = np.random.default_rng(scene_seed(master_seed, index, 1))
    speech = WavPool(speech_dir) if speech_dir else None
    noise_pool = WavPool(noise_dir) if noise_dir else None
    dry = [speech.draw(rng, n) if speech else synth_speech(rng, n) for _ in spec.sources]
    noise = noise_pool.draw(rng, n) if noise_pool else synth_noise(rng, n)
    sample = render_scene(spec, dry, noise, n_samples=n)
    stem = f"{split}_{index:05d}"
    files = {}
    for key, wave in (("mixture", sample.mixture), ("near", sample.target_near), ("far", sample.target_far)):
        name = f"{stem}_{key}.wav"
        write_wav(Path(out_dir) / name, wave)
        files[key] = name
    return {
        "index": index,
        "id": stem,
        "split": split,
        "env": env,
        "far_band": far_band,
        "n_near": len(spec.near_sources),
        "n_far": len(spec.far_sources),
        "snr_db": spec.snr_db,
        "duration_s": sample.duration_s,
        "sample_rate": SAMPLE_RATE,
        "files": files,
        "spec": spec.to_dict(),
    }


def generate_corpus(count, split, out_dir, mix_ratio=(60, 40), seed=0, far_band="SR",
                    counts=None, speech_dir=None, noise_dir=None, workers=1):
    """Render ``count`` scenes to WAV triples and write ``manifest.jsonl``.

    Scene ``i`` depends only on ``(seed, i)``; the first ``n_indoor`` indices
    are indoor.  Returns the manifest path.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if split not in SEGMENT_SECONDS:
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    n_in, n_out = split_counts(count, mix_ratio)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    jobs = [
        (i, "indoor" if i < n_in else "outdoor", split, seed, far_band, counts,
         speech_dir, noise_dir, str(out_dir))
        for i in range(count)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_scene_job, jobs))
    else:
        records = [_scene_job(j) for j in jobs]
    manifest = out_dir / "manifest.jsonl"
    tmp = manifest.with_name(manifest.name + ".tmp")
    with open(tmp, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(manifest)
    log.info("wrote %d scenes (%d indoor, %d outdoor) to %s", count, n_in, n_out, out_dir)
    return manifest


def read_manifest(path):
    path = Path(path)
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                rec["root"] = str(path.parent)
                records.append(rec)
    return records
