"""``dssep`` command line: simulate, train, separate, evaluate, bench, smoke.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  The log level comes from ``--log-level`` or ``DSSEP_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, evaluation, scene
from . import autodiff as ad
from .checkpoint import CheckpointError, atomic_write_bytes, load_model
from .model import ModelConfig, count_parameters, init_weights, separate
from .signals import SAMPLE_RATE, read_wav, write_wav
from .training import DataError, NumericalError, TrainConfig, evaluate_loss, load_examples, train

log = logging.getLogger("dssep")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = ("model", "train")
BENCH_VARIANTS = {"baseline": "baseline_quadratic", "proposed": "proposed_linear",
                  "encdec": "enc_dec_only", "roformer": "roformer"}
SMOKE_MODEL = {"channels": 16, "blocks": 1, "reduced": True}
SMOKE_TRAIN = {"batch": 1, "segment_seconds": 1.0, "checkpoint_every": 0, "val_fraction": 0.0}


class ConfigError(ValueError):
    """Invalid command line or configuration file."""


# --------------------------------------------------------------------------
# helpers


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def load_run_config(path):
    """Parse a JSON run config ``{"model": {...}, "train": {...}}``; unknown keys are errors."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    for key in raw:
        if key not in CONFIG_SECTIONS:
            raise ConfigError(f"config {path}: unknown key {key!r} (allowed: {', '.join(CONFIG_SECTIONS)})")
    try:
        mcfg = ModelConfig.from_dict(raw.get("model", {}))
        tcfg = TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    return mcfg, tcfg


def _parse_bands(text):
    bands = [b.strip() for b in text.split(",") if b.strip()]
    bad = [b for b in bands if b not in evaluation.BANDS]
    if bad or not bands:
        raise ConfigError(f"--bands must be a comma list from {','.join(evaluation.BANDS)}, got {text!r}")
    return bands


def _parse_counts(text):
    if text is None:
        return None
    try:
        n, f = (int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--counts must look like 1,1, got {text!r}") from None
    return n, f


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    try:
        ratio = scene.parse_ratio(args.ratio)
        scene.split_counts(1, ratio)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.band not in evaluation.BANDS:
        raise ConfigError(f"--band must be one of {evaluation.BANDS}")
    manifest = scene.generate_corpus(args.count, args.split, args.out, mix_ratio=ratio, seed=args.seed,
                                     far_band=args.band, counts=_parse_counts(args.counts),
                                     speech_dir=args.speech_dir, noise_dir=args.noise_dir,
                                     workers=args.workers)
    print(f"wrote {args.count} scenes; manifest {manifest}")
    return EXIT_OK


def cmd_train(args):
    mcfg, tcfg = load_run_config(args.config)
    if args.seed is not None:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), "seed": args.seed})
    result = train(args.manifest, mcfg, tcfg, args.out, resume=args.resume)
    last = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained to step {result.step}; final loss {last:.5f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_separate(args):
    cfg, weights, _ = load_model(args.ckpt)
    try:
        mixture = read_wav(args.input, expect_rate=SAMPLE_RATE)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read input {args.input}: {exc}") from None
    if mixture.shape[0] < cfg.fft:
        raise DataError(f"input {args.input} has {mixture.shape[0]} samples, fewer than one frame ({cfg.fft})")
    dtype = np.asarray(weights["enc.in.w"]).dtype
    t0 = time.perf_counter()
    near, far = separate(mixture.astype(dtype), cfg, weights)
    elapsed = time.perf_counter() - t0
    if not (np.all(np.isfinite(near)) and np.all(np.isfinite(far))):
        raise NumericalError("separation produced non-finite samples")
    write_wav(args.out_near, near)
    write_wav(args.out_far, far)
    duration = mixture.shape[0] / SAMPLE_RATE
    print(f"{args.input}: {duration:.2f} s audio, rtf {elapsed / duration:.3f}")
    return EXIT_OK


def cmd_evaluate(args):
    bands = _parse_bands(args.bands)
    records = scene.read_manifest(args.manifest)
    if args.identity:
        scores, cells = evaluation.evaluate(lambda m: (m, m), records, bands)
        source = "identity"
    else:
        cfg, weights, _ = load_model(args.ckpt)
        scores, cells = evaluation.evaluate(evaluation.model_separator(cfg, weights), records, bands)
        source = str(args.ckpt)
    evaluation.write_report(args.out, cells, scores, {"checkpoint": source, "bands": bands})
    print(evaluation.format_table(cells))
    return EXIT_OK


def cmd_bench(args):
    cfg = ModelConfig(variant=BENCH_VARIANTS[args.variant])
    lengths = bench.SCALING_LENGTHS if not args.no_curve else ()
    report = bench.run_bench(cfg, runs=args.runs, seconds=args.seconds, seed=args.seed or 0,
                             lengths=lengths, curve=not args.no_curve)
    write_json(args.out, report.to_dict())
    print(f"{cfg.variant}: params {report.params}, {report.macs_per_second_audio / 1e9:.2f} G MAC/s, "
          f"rtf {report.rtf:.3f}")
    return EXIT_OK


def run_smoke(seed, out_dir, scenes=20, steps=300, rtf_runs=bench.MIN_RUNS):
    """Simulate, overfit a tiny model, evaluate, benchmark.  Returns (report, timing).

    ``report`` holds only seed-determined values; wall-clock numbers go to
    ``timing``.
    """
    out_dir = Path(out_dir)
    stage = "simulate"
    timing = {}
    try:
        t0 = time.perf_counter()
        manifest = scene.generate_corpus(scenes, "train", out_dir / "data", seed=seed)
        records = scene.read_manifest(manifest)
        timing["simulate_s"] = time.perf_counter() - t0

        stage = "train"
        t0 = time.perf_counter()
        mcfg = ModelConfig(**SMOKE_MODEL)
        tcfg = TrainConfig(**SMOKE_TRAIN, steps=steps, seed=seed)
        examples = load_examples(records)
        init = init_weights(mcfg, seed=seed)
        full = TrainConfig(segment_seconds=scene.SEGMENT_SECONDS["train"])
        loss0 = evaluate_loss(init, examples, mcfg, full)
        result = train(None, mcfg, tcfg, out_dir / "train", examples=examples, init=init)
        loss1 = evaluate_loss(result.weights, examples, mcfg, full)
        timing["train_s"] = time.perf_counter() - t0
        reduction = 1.0 - loss1 / loss0
        if not reduction >= 0.5:
            raise AssertionError(f"loss fell by {reduction:.1%}, expected at least 50%")

        stage = "evaluate"
        t0 = time.perf_counter()
        _, cells = evaluation.evaluate(evaluation.model_separator(mcfg, result.weights), records)
        _, ident = evaluation.evaluate(lambda m: (m, m), records)
        for c in ident:
            for name in ("si_sdri_near", "si_sdri_far", "silence_near", "silence_far"):
                v = getattr(c, name)
                if v is not None and v != 0.0:
                    raise AssertionError(f"identity separator cell {c.env}/{c.n_near}/{c.n_far} {name}={v}")
        evaluation.write_report(out_dir / "eval.json", cells)
        timing["evaluate_s"] = time.perf_counter() - t0

        stage = "bench"
        t0 = time.perf_counter()
        with ad.no_grad(), ad.count_macs() as counter:
            separate(np.zeros(int(scene.SEGMENT_SECONDS["train"] * SAMPLE_RATE), dtype=np.float32),
                     mcfg, result.weights)
        analytic = bench.forward_macs(mcfg, int(scene.SEGMENT_SECONDS["train"] * SAMPLE_RATE))
        if counter.total != analytic:
            raise AssertionError(f"instrumented MACs {counter.total} != analytic {analytic}")
        params = {v: count_parameters(ModelConfig(variant=v)) for v in BENCH_VARIANTS.values()}
        if not params["proposed_linear"] < params["baseline_quadratic"]:
            raise AssertionError("proposed model is not smaller than the baseline")
        timing["rtf_tiny"] = bench.measure_rtf(mcfg, result.weights, runs=rtf_runs, seconds=1.0)
        timing["bench_s"] = time.perf_counter() - t0
    except AssertionError as exc:
        raise SmokeFailure(stage, str(exc)) from None
    except (DataError, NumericalError, OSError, ValueError) as exc:
        raise SmokeFailure(stage, f"{type(exc).__name__}: {exc}") from exc

    report = {
        "seed": seed,
        "scenes": scenes,
        "steps": steps,
        "loss_initial": loss0,
        "loss_final": loss1,
        "loss_reduction": reduction,
        "final_train_loss": result.history[-1]["loss"] if result.history else None,
        "eval_cells": [evaluation.asdict(c) for c in cells],
        "macs_tiny": analytic,
        "params": params,
        "macs_per_second": {v: bench.count_macs(ModelConfig(variant=v)) for v in BENCH_VARIANTS.values()},
    }
    return report, timing


class SmokeFailure(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"smoke stage '{stage}' failed: {message}")
        self.stage = stage


def cmd_smoke(args):
    seed = 7 if args.seed is None else args.seed
    report, timing = run_smoke(seed, args.out, scenes=args.scenes, steps=args.steps, rtf_runs=args.runs)
    write_json(Path(args.out) / "smoke_report.json", report)
    write_json(Path(args.out) / "smoke_timing.json", timing)
    print(f"smoke ok: loss {report['loss_initial']:.4f} -> {report['loss_final']:.4f} "
          f"({report['loss_reduction']:.1%} lower)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="dssep", description="Distance-based near/far speech separation.")
    parser.add_argument("--log-level", default=os.environ.get("DSSEP_LOG_LEVEL", "WARNING"),
                        help="logging level (default from DSSEP_LOG_LEVEL, else WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic corpus of scenes")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", default="60:40", help="indoor:outdoor percentage")
    p.add_argument("--band", default="SR", help="far-source distance band")
    p.add_argument("--counts", default=None, help="fixed #near,#far per scene, e.g. 1,1")
    p.add_argument("--speech-dir", default=None)
    p.add_argument("--noise-dir", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a separator")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="split a WAV into near and far WAVs")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-near", required=True)
    p.add_argument("--out-far", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("evaluate", help="SI-SDRi table on a manifest")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--identity", action="store_true", help="score the mixture itself (no model)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bands", default=",".join(evaluation.BANDS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="parameter/MAC accounting and timing")
    p.add_argument("--variant", choices=sorted(BENCH_VARIANTS), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=bench.MIN_RUNS)
    p.add_argument("--seconds", type=float, default=bench.CHUNK_SECONDS)
    p.add_argument("--no-curve", action="store_true", help="skip the attention scaling sweep")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("smoke", help="end-to-end simulate/train/evaluate/bench check")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--runs", type=int, default=bench.MIN_RUNS)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_smoke)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = getattr(logging, str(args.log_level).upper(), None)
    if not isinstance(level, int):
        print(f"error: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate" and not args.identity and not args.ckpt:
        print("error: evaluate needs --ckpt (or --identity)", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SmokeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        return EXIT_NUMERIC if isinstance(cause, (NumericalError, FloatingPointError)) else EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, FileNotFoundError, scene.PlacementError, scene.AbsorptionError,
            scene.SilentSignalError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
