"""Command-line surface: synth, train, calibrate, detect, localize, eval, bench.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from . import conformal, gridio, harness, localization, opticflow, synthdata
from . import trainer as trainer_mod
from . import vae
from .gridio import FormatError
from .vae import NumericError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oodflow",
        description="Streaming out-of-distribution motion detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled episode corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-id", type=int, required=True)
    p.add_argument("--n-ood", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--length", type=int, default=60)

    p = sub.add_parser("train", help="train the VAE on a corpus's ID episodes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--latent", type=int, default=24)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--max-flow", type=float, default=vae.DEFAULT_MAX_FLOW)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--fraction", type=float, default=0.2,
                   help="calibration holdout fraction (must match calibrate)")
    p.add_argument("--log", default=None, help="optional training-log CSV path")

    p = sub.add_parser("calibrate", help="build the calibration file from held-out flows")
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0,
                   help="must match the seed used for train's holdout split")
    p.add_argument("--fraction", type=float, default=0.2)

    p = sub.add_parser("detect", help="run the detector over one episode")
    p.add_argument("--episode", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--consecutive", type=int, default=10)
    p.add_argument("--out-curve", required=True)
    p.add_argument("--out-events", required=True)

    p = sub.add_parser("localize", help="write an anomaly overlay for one frame")
    p.add_argument("--episode", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--out-overlay", required=True)
    p.add_argument("--out-composite", required=True)
    p.add_argument("--overlay-threshold", type=float, default=0.5)

    p = sub.add_parser("eval", help="episode-level metrics over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--grid", default=None,
                   help="comma-separated thresholds to search (best by F1)")
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--consecutive", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="measure per-decision latency")
    p.add_argument("--episode", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--cal", required=True)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", required=True)

    return parser


def _cmd_synth(args) -> None:
    cfg = synthdata.SceneConfig(size=args.size, episode_length=args.length)
    manifests = synthdata.gen_benchmark(args.out, cfg, args.n_id, args.n_ood,
                                        args.seed)
    print(f"wrote {len(manifests)} episodes under {args.out}")


def _cmd_train(args) -> None:
    manifests = harness.load_corpus(args.corpus)
    arch = vae.VaeArchitecture(input_size=args.input_size, latent_dim=args.latent)
    dataset = harness.corpus_flow_dataset(manifests, opticflow.FlowParams(),
                                          arch, args.max_flow)
    if not dataset:
        raise ValueError("corpus contains no ID flow pairs to train on")
    train_part, _ = trainer_mod.split_calibration(dataset, args.fraction, args.seed)
    config = trainer_mod.TrainConfig(epochs=args.epochs, seed=args.seed,
                                     batch_size=args.batch_size,
                                     calibration_fraction=args.fraction)
    weights, log = trainer_mod.train(train_part, config, arch, args.max_flow)
    vae.save_weights(args.out, weights)
    if args.log:
        trainer_mod.write_training_log(args.log, log)
    final = log[-1].mean_total if log else float("nan")
    print(f"trained on {len(train_part)} flows for {args.epochs} epochs "
          f"(final mean loss {final:.4f}); weights -> {args.out}")


def _cmd_calibrate(args) -> None:
    weights = vae.load_weights(args.weights)
    manifests = harness.load_corpus(args.corpus)
    dataset = harness.corpus_flow_dataset(manifests, opticflow.FlowParams(),
                                          weights.arch, weights.max_flow)
    _, cal_part = trainer_mod.split_calibration(dataset, args.fraction, args.seed)
    cal = trainer_mod.build_calibration(weights, cal_part)
    stats = localization.activation_stats(weights, cal_part)
    harness.save_calibration(args.out, cal, stats)
    print(f"calibration set of {cal.size} scores -> {args.out}")


def _detector_config(args) -> conformal.DetectorConfig:
    return conformal.DetectorConfig(window=args.window,
                                    log_threshold=args.threshold,
                                    consecutive=args.consecutive)


def _cmd_detect(args) -> None:
    weights = vae.load_weights(args.weights)
    cal, _ = harness.load_calibration(args.cal)
    manifest = gridio.read_manifest(args.episode)
    frames = harness.load_frames(manifest)
    events, curve = conformal.detect_episode(
        frames, weights, cal, _detector_config(args),
        episode_id=manifest.id)
    conformal.write_curve_csv(args.out_curve, curve)
    conformal.write_events_jsonl(args.out_events, events)
    print(f"{manifest.id}: {len(events)} event(s); "
          f"peak log M = {max(pt.log_m for pt in curve):.3f}")


def _cmd_localize(args) -> None:
    weights = vae.load_weights(args.weights)
    _, stats = harness.load_calibration(args.cal)
    manifest = gridio.read_manifest(args.episode)
    frames = harness.load_frames(manifest)
    if not 1 <= args.frame < len(frames):
        raise ValueError(f"--frame must be in [1, {len(frames) - 1}] "
                         f"(a decision needs the preceding frame)")
    flow = opticflow.lucas_kanade(frames[args.frame - 1], frames[args.frame],
                                  opticflow.FlowParams())
    x = vae.preprocess(flow, weights.arch, weights.max_flow)
    out = vae.encode(weights, x)
    frame = frames[args.frame]
    overlay_map = localization.overlay(out.last_conv_activations, stats,
                                       frame.shape)
    composite = localization.render(frame, overlay_map, args.overlay_threshold)
    gridio.write_fgrid(args.out_overlay, overlay_map)
    gridio.write_ppm(args.out_composite, composite)
    print(f"overlay -> {args.out_overlay}; composite -> {args.out_composite}")


def _cmd_eval(args) -> None:
    weights = vae.load_weights(args.weights)
    cal, _ = harness.load_calibration(args.cal)
    manifests = harness.load_corpus(args.corpus)
    cfg = _detector_config(args)
    if args.grid:
        thresholds = [float(t) for t in args.grid.split(",") if t.strip()]
        best_tau, table, records = harness.grid_search(
            manifests, weights, cal, thresholds, cfg)
        print("threshold  f1      fpr     tpr     accuracy")
        for tau, m in table:
            print(f"{tau:9.3f}  {m.f1:.4f}  {m.fpr:.4f}  {m.tpr:.4f}  {m.accuracy:.4f}")
        metrics = harness.metrics_from_records(records)
        harness.write_metrics_json(args.out, metrics, best_tau)
        print(f"best threshold {best_tau} -> {args.out}")
    else:
        metrics, _ = harness.evaluate(manifests, weights, cal, cfg)
        harness.write_metrics_json(args.out, metrics, args.threshold)
        print(f"f1={metrics.f1:.4f} fpr={metrics.fpr:.4f} tpr={metrics.tpr:.4f} "
              f"-> {args.out}")


def _cmd_bench(args) -> None:
    weights = vae.load_weights(args.weights)
    cal, _ = harness.load_calibration(args.cal)
    manifest = gridio.read_manifest(args.episode)
    frames = harness.load_frames(manifest)
    report = harness.measure_latency(frames, weights, cal,
                                     conformal.DetectorConfig(),
                                     warmup=args.warmup, reps=args.reps)
    harness.write_latency_json(args.out, report)
    print(f"mean {report.mean_ms:.2f} ms/decision (p95 {report.p95_ms:.2f}); "
          f"flow {report.flow_ms:.2f}, encode {report.encode_ms:.2f}, "
          f"conformal {report.conformal_ms:.2f}")


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "calibrate": _cmd_calibrate,
    "detect": _cmd_detect,
    "localize": _cmd_localize,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OSError, EOFError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
