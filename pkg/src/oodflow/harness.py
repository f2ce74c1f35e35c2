"""Corpus evaluation, threshold search, latency measurement, and artifact files.

An episode counts as a positive when the detector emits at least one event
anywhere in it; metrics are episode-level confusion counts.  Threshold grid
searches reuse each episode's log-martingale trace, which does not depend
on the threshold.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conformal, gridio, localization, opticflow, vae
from .gridio import EpisodeManifest
from .trainer import CalibrationSet


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    f1: float
    accuracy: float
    degenerate_f1: bool

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        """Confusion-count arithmetic with explicit degenerate-F1 flagging."""
        total = tp + fp + tn + fn
        tpr = tp / (tp + fn) if tp + fn > 0 else 0.0
        fpr = fp / (fp + tn) if fp + tn > 0 else 0.0
        degenerate = (2 * tp + fp + fn) == 0
        f1 = 0.0 if degenerate else 2 * tp / (2 * tp + fp + fn)
        accuracy = (tp + tn) / total if total > 0 else 0.0
        return cls(tp=tp, fp=fp, tn=tn, fn=fn, tpr=tpr, fpr=fpr, f1=f1,
                   accuracy=accuracy, degenerate_f1=degenerate)


@dataclass
class EpisodeRecord:
    """Per-episode evaluation outcome, including the martingale trace."""

    episode_id: str
    label: str
    gt_onset: int | None
    events: list[conformal.DetectionEvent] = field(default_factory=list)
    curve: list[conformal.CurvePoint] = field(default_factory=list)
    peak_log_m: float = float("-inf")
    error: str | None = None

    @property
    def detected(self) -> bool:
        return len(self.events) > 0


@dataclass(frozen=True)
class LatencyReport:
    mean_ms: float
    p95_ms: float
    flow_ms: float
    encode_ms: float
    conformal_ms: float
    reps: int


def load_corpus(corpus_dir) -> list[EpisodeManifest]:
    """Load every manifest listed in a corpus index.json (or by scanning)."""
    corpus_dir = Path(corpus_dir)
    index_path = corpus_dir / "index.json"
    if index_path.exists():
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
        rel_paths = index.get("episodes", [])
        paths = [corpus_dir / rel for rel in rel_paths]
    else:
        paths = sorted(corpus_dir.glob("*/manifest.json"))
    if not paths:
        raise ValueError(f"no episode manifests found under {corpus_dir}")
    return [gridio.read_manifest(p) for p in paths]


def load_frames(manifest: EpisodeManifest) -> list[np.ndarray]:
    """Read an episode's frames as (H, W) float32 arrays."""
    return [gridio.read_pgm(p)[0] for p in manifest.frame_paths]


def corpus_flow_dataset(manifests, flow_params: opticflow.FlowParams,
                        arch: vae.VaeArchitecture,
                        max_flow: float = vae.DEFAULT_MAX_FLOW,
                        ids_only: bool = True) -> list[np.ndarray]:
    """Preprocessed flow grids from every consecutive frame pair.

    With ids_only (the default) only ID-labeled episodes contribute, which
    is what both training and calibration require.
    """
    dataset: list[np.ndarray] = []
    for manifest in manifests:
        if ids_only and manifest.label != gridio.LABEL_ID:
            continue
        frames = load_frames(manifest)
        for a, b in zip(frames, frames[1:]):
            flow = opticflow.lucas_kanade(a, b, flow_params)
            dataset.append(vae.preprocess(flow, arch, max_flow))
    return dataset


# ---------------------------------------------------------------------------
# Evaluation and threshold search
# ---------------------------------------------------------------------------

def _run_episodes(manifests, weights, cal, cfg, flow_params) -> list[EpisodeRecord]:
    records: list[EpisodeRecord] = []
    for manifest in manifests:
        record = EpisodeRecord(episode_id=manifest.id, label=manifest.label,
                               gt_onset=manifest.onset_frame)
        try:
            frames = load_frames(manifest)
            events, curve = conformal.detect_episode(
                frames, weights, cal, cfg, flow_params, episode_id=manifest.id)
            record.events = events
            record.curve = curve
            if curve:
                record.peak_log_m = max(pt.log_m for pt in curve)
        except (OSError, EOFError, gridio.FormatError, ValueError) as exc:
            warnings.warn(f"skipping unreadable episode {manifest.id}: {exc}")
            record.error = str(exc)
        records.append(record)
    return records


def metrics_from_records(records: list[EpisodeRecord]) -> Metrics:
    tp = fp = tn = fn = 0
    for r in records:
        if r.error is not None:
            continue
        positive = r.detected
        if r.label == gridio.LABEL_OOD:
            tp, fn = tp + positive, fn + (not positive)
        else:
            fp, tn = fp + positive, tn + (not positive)
    return Metrics.from_counts(tp, fp, tn, fn)


def evaluate(manifests, weights, cal: CalibrationSet, cfg: conformal.DetectorConfig,
             flow_params: opticflow.FlowParams | None = None):
    """Episode-level confusion metrics over a labeled corpus.

    Returns (Metrics, per-episode records).  Unreadable episodes are skipped
    with a warning and carry their error in the record.
    """
    if flow_params is None:
        flow_params = opticflow.FlowParams()
    if not manifests:
        raise ValueError("corpus must be nonempty")
    records = _run_episodes(manifests, weights, cal, cfg, flow_params)
    return metrics_from_records(records), records


def rescore_records(records: list[EpisodeRecord], cfg: conformal.DetectorConfig):
    """Re-run the exceedance rule on cached traces for a new threshold."""
    rescored: list[EpisodeRecord] = []
    for r in records:
        nr = EpisodeRecord(episode_id=r.episode_id, label=r.label,
                           gt_onset=r.gt_onset, curve=r.curve,
                           peak_log_m=r.peak_log_m, error=r.error)
        if r.error is None and r.curve:
            start = r.curve[0].frame
            nr.events = conformal.events_from_curve(
                [pt.log_m for pt in r.curve], cfg, episode_id=r.episode_id,
                start_frame=start)
        rescored.append(nr)
    return rescored


def grid_search(manifests, weights, cal: CalibrationSet, thresholds,
                cfg: conformal.DetectorConfig,
                flow_params: opticflow.FlowParams | None = None):
    """Evaluate each threshold on shared traces; pick the best by F1.

    Ties prefer lower FPR, then lower threshold.  Returns
    (best_threshold, [(threshold, Metrics), ...], records_at_best).
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("thresholds must be nonempty")
    if flow_params is None:
        flow_params = opticflow.FlowParams()
    base_records = _run_episodes(manifests, weights, cal, cfg, flow_params)
    table: list[tuple[float, Metrics]] = []
    best = None
    best_records = None
    for tau in thresholds:
        tau_cfg = conformal.DetectorConfig(
            window=cfg.window, log_threshold=tau, consecutive=cfg.consecutive,
            quadrature_nodes=cfg.quadrature_nodes)
        records = rescore_records(base_records, tau_cfg)
        metrics = metrics_from_records(records)
        table.append((tau, metrics))
        key = (metrics.f1, -metrics.fpr, -tau)
        if best is None or key > best[0]:
            best = (key, tau)
            best_records = records
    return best[1], table, best_records


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def measure_latency(frames, weights, cal: CalibrationSet,
                    cfg: conformal.DetectorConfig,
                    flow_params: opticflow.FlowParams | None = None,
                    warmup: int = 3, reps: int = 50) -> LatencyReport:
    """Wall-clock time of per-frame detection decisions.

    A decision is flow + preprocessing + encoding + KL + p-value +
    martingale on one frame pair.  The first ``warmup`` decisions are
    discarded; frame pairs are cycled to reach ``reps`` measurements.
    Breakdown buckets: flow (optic flow), encode (preprocess/encoder/KL),
    conformal (p-value and martingale update).
    """
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if reps < 10:
        raise ValueError("reps must be >= 10")
    if flow_params is None:
        flow_params = opticflow.FlowParams()
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")

    pairs = list(zip(frames, frames[1:]))
    state = conformal.DetectorState()
    totals, flows_t, encodes_t, conformals_t = [], [], [], []
    for i in range(warmup + reps):
        a, b = pairs[i % len(pairs)]
        t0 = time.perf_counter()
        flow = opticflow.lucas_kanade(a, b, flow_params)
        t1 = time.perf_counter()
        x = vae.preprocess(flow, weights.arch, weights.max_flow)
        out = vae.encode(weights, x)
        alpha = vae.kl_score(out.posterior)
        t2 = time.perf_counter()
        state, _ = conformal.step(state, alpha, cal, cfg)
        t3 = time.perf_counter()
        if i >= warmup:
            totals.append((t3 - t0) * 1e3)
            flows_t.append((t1 - t0) * 1e3)
            encodes_t.append((t2 - t1) * 1e3)
            conformals_t.append((t3 - t2) * 1e3)
    return LatencyReport(
        mean_ms=float(np.mean(totals)),
        p95_ms=float(np.percentile(totals, 95)),
        flow_ms=float(np.mean(flows_t)),
        encode_ms=float(np.mean(encodes_t)),
        conformal_ms=float(np.mean(conformals_t)),
        reps=reps,
    )


# ---------------------------------------------------------------------------
# Artifact files
# ---------------------------------------------------------------------------

def save_calibration(path, cal: CalibrationSet,
                     stats: localization.ActivationStats) -> None:
    """Write calibration scores plus activation statistics as one JSON file."""
    doc = {
        "scores": [float(s) for s in cal.scores],
        "activation_shape": list(stats.mean.shape),
        "activation_mean": stats.mean.ravel().tolist(),
        "activation_std": stats.std.ravel().tolist(),
        "count": stats.count,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_calibration(path):
    """Read back (CalibrationSet, ActivationStats) written by save_calibration."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for key in ("scores", "activation_shape", "activation_mean", "activation_std", "count"):
        if key not in doc:
            raise ValueError(f"calibration file missing field {key!r}")
    shape = tuple(doc["activation_shape"])
    stats = localization.ActivationStats(
        mean=np.asarray(doc["activation_mean"], dtype=np.float64).reshape(shape),
        std=np.asarray(doc["activation_std"], dtype=np.float64).reshape(shape),
        count=int(doc["count"]),
    )
    return CalibrationSet(scores=np.asarray(doc["scores"], dtype=np.float64)), stats


def write_metrics_json(path, metrics: Metrics, threshold: float) -> None:
    """Emit the evaluation summary in the fixed machine-readable schema."""
    doc = {
        "threshold": threshold,
        "tp": metrics.tp,
        "fp": metrics.fp,
        "tn": metrics.tn,
        "fn": metrics.fn,
        "tpr": metrics.tpr,
        "fpr": metrics.fpr,
        "f1": metrics.f1,
        "accuracy": metrics.accuracy,
        "degenerate_f1": metrics.degenerate_f1,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_latency_json(path, report: LatencyReport) -> None:
    doc = {
        "mean_ms": report.mean_ms,
        "p95_ms": report.p95_ms,
        "flow_ms": report.flow_ms,
        "encode_ms": report.encode_ms,
        "conformal_ms": report.conformal_ms,
        "reps": report.reps,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
