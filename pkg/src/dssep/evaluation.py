"""SI-SDR metrics and the per-scenario evaluation table.

Scenes are grouped into cells by (environment, far band, #near, #far).  A
head whose target is silent in a scene is scored with
:func:`silence_suppression` (reported separately) because SI-SDR is
undefined for an all-zero reference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, load_model
from .model import separate
from .scene import read_manifest
from .signals import read_wav

SI_SDR_CAP = 60.0
SILENCE_CAP = 80.0
BANDS = ("SR", "UR0", "UR1", "UR2")
METRIC_NOTES = (
    "si_sdri = si_sdr(estimate, target) - si_sdr(mixture, target), capped at 60 dB per term; "
    "heads with a silent target report silence suppression 10*log10(P(mixture)/P(estimate)), "
    "capped at 80 dB, instead of SI-SDR."
)


class ZeroTargetError(ValueError):
    """SI-SDR requested for an all-zero reference."""


def si_sdr(est, target, cap=SI_SDR_CAP):
    """10 log10(|a t|^2 / |a t - e|^2), a = <e, t> / <t, t>, limited to ``cap`` dB."""
    est = np.asarray(est, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if est.shape != target.shape:
        raise ValueError(f"estimate {est.shape} and target {target.shape} differ in length")
    tt = float(np.dot(target, target))
    if tt == 0.0:
        raise ZeroTargetError("SI-SDR is undefined for an all-zero target")
    alpha = float(np.dot(est, target)) / tt
    proj = alpha * target
    num = float(np.dot(proj, proj))
    resid = proj - est
    den = float(np.dot(resid, resid))
    if den == 0.0:
        return cap
    if num == 0.0:  # estimate orthogonal to the target
        return -cap
    return min(cap, 10.0 * math.log10(num / den))


def si_sdri(est, mixture, target, cap=SI_SDR_CAP):
    return si_sdr(est, target, cap) - si_sdr(mixture, target, cap)


def silence_suppression(est, mixture, cap=SILENCE_CAP):
    """10 log10(P(mixture) / P(estimate)) in dB; ``cap`` when the estimate is exactly silent."""
    est = np.asarray(est, dtype=np.float64)
    mixture = np.asarray(mixture, dtype=np.float64)
    p_mix = float(np.mean(mixture * mixture))
    if p_mix == 0.0:
        raise ValueError("silence suppression needs a non-silent mixture")
    p_est = float(np.mean(est * est))
    if p_est == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(p_mix / p_est))


# --------------------------------------------------------------------------
# scene-level scores and aggregation


@dataclass
class SceneScore:
    id: str
    env: str
    far_band: str
    n_near: int
    n_far: int
    si_sdr_near: float = None
    si_sdr_far: float = None
    si_sdri_near: float = None
    si_sdri_far: float = None
    silence_near: float = None
    silence_far: float = None


def score_scene(scene_id, meta, mixture, target_near, target_far, est_near, est_far):
    score = SceneScore(scene_id, meta.get("env", "?"), meta.get("far_band", "?"),
                       int(meta.get("n_near", -1)), int(meta.get("n_far", -1)))
    for head, target, est in (("near", target_near, est_near), ("far", target_far, est_far)):
        if not np.all(np.isfinite(est)):
            raise FloatingPointError(f"scene {scene_id}: non-finite {head} estimate")
        if np.any(target != 0):
            sdr = si_sdr(est, target)
            setattr(score, f"si_sdr_{head}", sdr)
            setattr(score, f"si_sdri_{head}", sdr - si_sdr(mixture, target))
        else:
            setattr(score, f"silence_{head}", silence_suppression(est, mixture))
    return score


@dataclass
class SeparationMetrics:
    """Averages over one (env, band, #near, #far) cell; None where no scene defines the value."""

    env: str
    far_band: str
    n_near: int
    n_far: int
    count: int
    si_sdr_near: float = None
    si_sdr_far: float = None
    si_sdri_near: float = None
    si_sdri_far: float = None
    silence_near: float = None
    silence_far: float = None


_AVERAGED = ("si_sdr_near", "si_sdr_far", "si_sdri_near", "si_sdri_far", "silence_near", "silence_far")


def aggregate(scores):
    """Cell averages; ``math.fsum`` makes them independent of scene order."""
    cells = {}
    for s in scores:
        cells.setdefault((s.env, s.far_band, s.n_near, s.n_far), []).append(s)
    out = []
    for key in sorted(cells):
        group = cells[key]
        m = SeparationMetrics(*key, count=len(group))
        for field_name in _AVERAGED:
            vals = [getattr(s, field_name) for s in group if getattr(s, field_name) is not None]
            if vals:
                setattr(m, field_name, math.fsum(vals) / len(vals))
        out.append(m)
    return out


def format_table(cells):
    """Aligned text table: one row per cell, near/far SI-SDRi (or silence dB marked with 's')."""
    header = ("env", "band", "#n/#f", "scenes", "near dB", "far dB")
    rows = []
    for c in cells:
        def show(head):
            v = getattr(c, f"si_sdri_{head}")
            if v is not None:
                return f"{v:7.2f}"
            s = getattr(c, f"silence_{head}")
            return f"{s:6.2f}s" if s is not None else "      -"
        rows.append((c.env, c.far_band, f"{c.n_near}/{c.n_far}", str(c.count), show("near"), show("far")))
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
    lines.append("(near/far: mean SI-SDRi; values marked 's' are silence suppression for silent targets)")
    return "\n".join(lines)


def _load_scene(rec):
    root = Path(rec.get("root", "."))
    waves = {}
    for key in ("mixture", "near", "far"):
        path = root / rec["files"][key]
        if not path.exists():
            raise FileNotFoundError(f"missing file {path}")
        waves[key] = read_wav(path)
    return waves


def evaluate(separator, records, bands=BANDS):
    """Score ``separator(mixture) -> (near, far)`` on manifest ``records`` from the chosen bands."""
    bands = tuple(bands)
    unknown = set(bands) - set(BANDS)
    if unknown:
        raise ValueError(f"unknown band(s) {sorted(unknown)}; expected a subset of {BANDS}")
    scores = []
    for rec in records:
        if rec.get("far_band") not in bands:
            continue
        w = _load_scene(rec)
        near, far = separator(w["mixture"])
        scores.append(score_scene(rec.get("id", "?"), rec, w["mixture"], w["near"], w["far"],
                                  np.asarray(near, dtype=np.float64), np.asarray(far, dtype=np.float64)))
    return scores, aggregate(scores)


def report_dict(cells, scores=None, extra=None):
    out = {"notes": METRIC_NOTES, "cells": [asdict(c) for c in cells]}
    if scores is not None:
        out["scenes"] = [asdict(s) for s in scores]
    out.update(extra or {})
    return out


def write_report(path, cells, scores=None, extra=None):
    """JSON report at ``path`` plus the text table next to it (``.txt``); both written atomically."""
    path = Path(path)
    body = json.dumps(report_dict(cells, scores, extra), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, body.encode())
    atomic_write_bytes(path.with_suffix(".txt"), (format_table(cells) + "\n").encode())
    return path


def model_separator(cfg, weights):
    def run(mixture):
        return separate(np.asarray(mixture, dtype=np.asarray(weights["enc.in.w"]).dtype), cfg, weights)
    return run


def evaluate_checkpoint(ckpt_path, manifest, bands=BANDS, out=None):
    cfg, weights, _ = load_model(ckpt_path)
    scores, cells = evaluate(model_separator(cfg, weights), read_manifest(manifest), bands)
    if out is not None:
        write_report(out, cells, scores, {"checkpoint": str(ckpt_path), "bands": list(bands)})
    return scores, cells
