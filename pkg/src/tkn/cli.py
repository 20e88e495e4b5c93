"""Command-line interface.

Subcommands: ``gen-data``, ``train-detector``, ``train-predictor``,
``predict``, ``eval``, ``bench``.  Every command takes ``--config`` (a
preset name or JSON file) and ``--seed``, and writes a manifest alongside
its outputs.  Two-step ordering is enforced: ``train-predictor`` refuses to
run without a detector checkpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .checkpoint import load_models, save_models
from .data import export_png, generate_dataset, load_dataset, load_sequence, save_dataset, save_sequence
from .detector import train_detector
from .errors import TknError
from .metrics import benchmark, evaluate_pipeline
from .pipelines import Pipeline
from .predictor import detect_sequences, train_predictor, train_sequential


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True,
                   help="preset name (paper, desk, sprite32) or JSON file")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tkn",
                                     description="keypoint-based video prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic sprite dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--png", action="store_true",
                   help="also export the first test sequence as PNG frames")

    p = sub.add_parser("train-detector", help="train the keypoint detector")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train-predictor",
                       help="train the predictor on a frozen detector")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True,
                   help="detector checkpoint (train-detector output)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-sequential", action="store_true",
                   help="skip training the sequential per-step encoders")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("predict", help="predict future frames for one sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help=".tknseq file with >= t frames")
    p.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--horizon", type=int, default=None,
                   help="frames to predict (sequential mode; default from config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="reserved; inference is deterministic")

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=30)
    p.add_argument("--out", required=True, help="report JSON file")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="latency benchmark for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--repetitions", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", required=True, help="result JSON file")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_pipeline(checkpoint_path: str):
    ckpt, detector, parallel, sequential = load_models(checkpoint_path)
    if detector is None:
        raise TknError(f"{checkpoint_path} has no detector segment")
    return ckpt, Pipeline(detector, parallel, sequential)


def _bench_threads() -> int | None:
    raw = os.environ.get("TKN_BENCH_THREADS", "1")
    return None if raw.lower() in ("", "none") else int(raw)


def cmd_gen_data(args) -> int:
    cfg = config_mod.load_config(args.config)
    out = Path(args.out)
    scene = config_mod.scene_config(cfg, seed=args.seed)
    train_set = generate_dataset(scene, "train")
    test_set = generate_dataset(scene, "test")
    save_dataset(out, train_set, "train")
    save_dataset(out, test_set, "test")
    if args.png:
        export_png(out / "png", test_set.sequences[0])
    config_mod.write_manifest(out / "manifest.json", "gen-data", cfg, args.seed,
                              outputs=["train_index.json", "test_index.json"])
    print(f"wrote {len(train_set.sequences)} train + {len(test_set.sequences)} "
          f"test sequences to {out}")
    return 0


def cmd_train_detector(args) -> int:
    cfg = config_mod.load_config(args.config)
    scene = config_mod.scene_config(cfg)
    dataset = load_dataset(args.data, scene, "train")
    train_cfg = config_mod.detector_train_config(cfg)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if not args.quiet:
        train_cfg.log_every = max(1, train_cfg.epochs // 10)
    detector, history = train_detector(dataset.sequences,
                                       config_mod.detector_config(cfg),
                                       train_cfg, args.seed)
    save_models(args.out, cfg, detector=detector)
    config_mod.write_manifest(Path(str(args.out) + ".manifest.json"),
                              "train-detector", cfg, args.seed, outputs=[args.out])
    print(f"detector loss {history[0]:.6f} -> {history[-1]:.6f} "
          f"over {len(history)} epochs; checkpoint at {args.out}")
    return 0


def cmd_train_predictor(args) -> int:
    cfg = config_mod.load_config(args.config)
    if not Path(args.detector).exists():
        raise TknError(
            f"missing prerequisite: detector checkpoint {args.detector!r} not found; "
            f"run train-detector first (two-step training)"
        )
    ckpt, detector, _, _ = load_models(args.detector)
    for section in ("detector", "data"):
        if ckpt.config[section] != cfg[section]:
            raise TknError(
                f"--config {section} section differs from the detector checkpoint's; "
                f"retrain or pass the matching config"
            )
    detector.set_trainable(False)  # freeze: two-step training contract

    scene = config_mod.scene_config(cfg)
    dataset = load_dataset(args.data, scene, "train")
    tracks = detect_sequences(detector, dataset.sequences)

    pred_cfg = config_mod.predictor_config(cfg)
    train_cfg = config_mod.predictor_train_config(cfg)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if not args.quiet:
        train_cfg.log_every = max(1, train_cfg.epochs // 10)
    parallel, history = train_predictor(tracks, pred_cfg, train_cfg, args.seed)
    sequential = None
    if not args.no_sequential:
        sequential, _ = train_sequential(
            tracks, pred_cfg, cfg["prediction"]["horizon"], train_cfg, args.seed)
    save_models(args.out, cfg, detector=detector, parallel=parallel,
                sequential=sequential)
    config_mod.write_manifest(Path(str(args.out) + ".manifest.json"),
                              "train-predictor", cfg, args.seed, outputs=[args.out])
    print(f"predictor loss {history[0]:.6f} -> {history[-1]:.6f} "
          f"over {len(history)} epochs; checkpoint at {args.out}")
    return 0


def cmd_predict(args) -> int:
    ckpt, pipeline = _load_pipeline(args.checkpoint)
    frames, _ = load_sequence(args.input)
    t = ckpt.config["prediction"]["t"]
    horizon = args.horizon or ckpt.config["prediction"]["horizon"]
    if len(frames) < t:
        raise TknError(f"input has {len(frames)} frames, need at least t={t}")
    window = frames[:t]
    preds = (pipeline.predict_parallel(window) if args.mode == "parallel"
             else pipeline.predict_sequential(window, horizon))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sequence(out / "predicted.tknseq", preds)
    config_mod.write_manifest(out / "manifest.json", "predict", ckpt.config,
                              args.seed, outputs=["predicted.tknseq"])
    print(f"wrote {len(preds)} predicted frames to {out / 'predicted.tknseq'}")
    return 0


def cmd_eval(args) -> int:
    ckpt, pipeline = _load_pipeline(args.checkpoint)
    scene = config_mod.scene_config(ckpt.config)
    dataset = load_dataset(args.data, scene, "test")
    horizon = args.horizon or ckpt.config["prediction"]["horizon"]
    report = evaluate_pipeline(pipeline, dataset.sequences, args.mode, horizon,
                               repetitions=args.repetitions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    config_mod.write_manifest(Path(str(out) + ".manifest.json"), "eval",
                              ckpt.config, args.seed, outputs=[str(out)])
    print(f"{args.mode}: ssim {report.ssim:.4f} psnr {report.psnr:.2f} dB "
          f"median {report.latency_ms['median']:.1f} ms fps {report.fps:.0f}")
    return 0


def cmd_bench(args) -> int:
    ckpt, pipeline = _load_pipeline(args.checkpoint)
    t = ckpt.config["prediction"]["t"]
    horizon = ckpt.config["prediction"]["horizon"]
    det_cfg = pipeline.detector.config
    rng = np.random.default_rng(args.seed)
    probe = rng.uniform(0.0, 1.0, size=(t, det_cfg.channels_in,
                                        det_cfg.height, det_cfg.width))
    if args.mode == "parallel":
        run = lambda: pipeline.predict_parallel(probe)  # noqa: E731
        frames = t
    else:
        run = lambda: pipeline.predict_sequential(probe, horizon)  # noqa: E731
        frames = horizon
    pipeline.counters.reset()
    run()
    passes = pipeline.counters.predictor_passes
    result = benchmark(run, frames_per_run=frames, repetitions=args.repetitions,
                       warmup=args.warmup, threads=_bench_threads())
    payload = {
        "mode": args.mode,
        "median_ms": result.median_ms,
        "p95_ms": result.p95_ms,
        "fps": result.fps,
        "repetitions": result.repetitions,
        "frames_per_run": result.frames_per_run,
        "predictor_passes_per_run": passes,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True))
    config_mod.write_manifest(Path(str(out) + ".manifest.json"), "bench",
                              ckpt.config, args.seed, outputs=[str(out)])
    print(f"{args.mode}: median {result.median_ms:.1f} ms, p95 "
          f"{result.p95_ms:.1f} ms, {result.fps:.0f} fps "
          f"({passes} predictor pass(es) per run)")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-detector": cmd_train_detector,
    "train-predictor": cmd_train_predictor,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except TknError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
