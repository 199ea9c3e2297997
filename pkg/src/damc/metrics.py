"""Evaluation metrics: PSNR, landmark distance, the perceptual surrogate, the
envelope/aperture sync correlation, and the aggregate evaluation report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
from scipy.signal import detrend

from .audio import MelParams, align_windows, compute_mel
from .errors import UndefinedMetricError
from .render import RenderedFrame
from .train import (
    Checkpoint,
    TrainData,
    perceptual_surrogate,
    render_checkpoint,
)

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def psnr(pred: np.ndarray, gt: np.ndarray, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / mse), capped at 100 dB for identical frames."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(max_val**2 / mse), PSNR_CAP))


@dataclass
class LandmarkSet:
    points: np.ndarray    # [K, 2] (column, row)
    visible: np.ndarray   # [K] bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.points.shape != (len(self.visible), 2):
            raise ValueError("points must be [K, 2] matching visibility flags")


def lmd(pred: list, gt: list) -> float:
    """Mean Euclidean deviation over frames and mutually visible points."""
    if len(pred) != len(gt):
        raise ValueError("frame counts differ")
    dists = []
    for p, g in zip(pred, gt):
        if p.points.shape != g.points.shape:
            raise ValueError("landmark counts differ")
        both = p.visible & g.visible
        if both.any():
            d = np.linalg.norm(p.points[both] - g.points[both], axis=1)
            dists.append(d.mean())
    if not dists:
        raise UndefinedMetricError("no mutually visible landmarks")
    return float(np.mean(dists))


def extract_landmarks_synthetic(
    frame: RenderedFrame, spec, area_threshold: int = 3, color_tol: float = 0.5
) -> LandmarkSet:
    """Brightness-weighted centroid of each marker's color-keyed region.

    A marker whose keyed region covers fewer than area_threshold pixels is
    flagged invisible."""
    rgb = np.asarray(frame.rgb, dtype=np.float64)
    h, w, _ = rgb.shape
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    points, visible = [], []
    for f in spec.fiducials:
        key = np.asarray(f.color, dtype=np.float64)
        dist = np.linalg.norm(rgb - key[None, None, :], axis=2)
        mask = dist < color_tol
        if mask.sum() < area_threshold:
            log.warning("marker %s not found in frame", f.name)
            points.append((np.nan, np.nan))
            visible.append(False)
            continue
        wgt = rgb[mask].sum(axis=1)  # brightness weights
        points.append((
            float((cols[mask] * wgt).sum() / wgt.sum()),
            float((rows[mask] * wgt).sum() / wgt.sum()),
        ))
        visible.append(True)
    return LandmarkSet(np.array(points), np.array(visible))


def rms_envelope(windows) -> np.ndarray:
    """Per-frame audio loudness: RMS of each aligned waveform window, then
    linear detrend."""
    rms = np.sqrt((windows.wave_windows.astype(np.float64) ** 2).mean(axis=1))
    return detrend(rms)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("series lengths differ")
    if a.std() == 0.0 or b.std() == 0.0:
        raise UndefinedMetricError("zero variance in a sync series")
    return float(np.corrcoef(a, b)[0, 1])


def aperture_from_frames(frames, spec) -> np.ndarray:
    """Vertical extent of the lip marker pair, extracted per frame."""
    names = [f.name for f in spec.fiducials]
    iu, il = names.index("lip_upper"), names.index("lip_lower")
    out = []
    for fr in frames:
        lm = extract_landmarks_synthetic(fr, spec)
        if not (lm.visible[iu] and lm.visible[il]):
            out.append(np.nan)
        else:
            out.append(lm.points[il, 1] - lm.points[iu, 1])
    return np.array(out)


def sync_metric_series(audio_env: np.ndarray, aperture: np.ndarray) -> float:
    """Pearson correlation of the audio envelope against an aperture series."""
    return pearson(audio_env, aperture)


def sync_metric(audio_env: np.ndarray, frames, spec) -> float:
    """Pearson correlation of the audio envelope against the mouth aperture
    measured from rendered frames."""
    ap = aperture_from_frames(frames, spec)
    if np.isnan(ap).all():
        raise UndefinedMetricError("lip markers not found in any frame")
    if np.isnan(ap).any():
        ap = np.where(np.isnan(ap), np.nanmean(ap), ap)
    return pearson(audio_env, ap)


@dataclass
class EvalReport:
    dataset_id: str
    config_hash: str
    fusion_mode: str
    scalars: dict = dc_field(default_factory=dict)
    series: dict = dc_field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "config_hash": self.config_hash,
            "fusion_mode": self.fusion_mode,
            "scalars": self.scalars,
            "series": {k: list(map(float, v)) for k, v in self.series.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


CSV_COLUMNS = ("psnr", "lpips_surrogate", "lmd", "sync_surrogate")


def write_report_csv(path, reports: list) -> None:
    """One row per report, Table-style column order."""
    lines = ["mode," + ",".join(CSV_COLUMNS)]
    for r in reports:
        vals = [f"{r.scalars.get(c, float('nan')):.6f}" for c in CSV_COLUMNS]
        lines.append(",".join([r.fusion_mode] + vals))
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate(
    ckpt: Checkpoint,
    data: TrainData,
    bundle,
    which=CSV_COLUMNS,
    mode: str | None = None,
    dataset_id: str = "synthetic",
    n_samples: int | None = None,
) -> EvalReport:
    """Render the held-out frames and score them against ground truth."""
    mode = mode or ckpt.config.get("fusion_mode", "full")
    report = EvalReport(
        dataset_id=dataset_id, config_hash=ckpt.config_hash, fusion_mode=mode
    )
    if not which:
        return report
    spec = bundle.spec
    idx = data.holdout_idx
    rendered = [
        render_checkpoint(ckpt, data, t, n_samples=n_samples, mode=mode) for t in idx
    ]
    gts = [bundle.frames[t] for t in idx]
    if "psnr" in which:
        series = [psnr(r.rgb, g) for r, g in zip(rendered, gts)]
        report.series["psnr"] = series
        report.scalars["psnr"] = float(np.mean(series))
    if "lpips_surrogate" in which:
        series = []
        for r, g in zip(rendered, gts):
            with torch.no_grad():
                series.append(float(perceptual_surrogate(
                    torch.as_tensor(r.rgb, dtype=torch.float64),
                    torch.as_tensor(g, dtype=torch.float64),
                )))
        report.series["lpips_surrogate"] = series
        report.scalars["lpips_surrogate"] = float(np.mean(series))
    if "lmd" in which:
        pred_lms = [extract_landmarks_synthetic(r, spec) for r in rendered]
        gt_lms = [
            LandmarkSet(bundle.landmarks[t], np.ones(len(spec.fiducials), bool))
            for t in idx
        ]
        per_frame = []
        for p, g in zip(pred_lms, gt_lms):
            try:
                per_frame.append(lmd([p], [g]))
            except UndefinedMetricError:
                per_frame.append(float("nan"))
        report.series["lmd"] = per_frame
        report.scalars["lmd"] = float(np.nanmean(per_frame))
    if "sync_surrogate" in which:
        mel_cfg = MelParams()
        mel = compute_mel(bundle.audio, mel_cfg)
        windows = align_windows(
            bundle.audio, mel, spec.fps, n_frames=bundle.n_frames
        )
        env = rms_envelope(windows)[np.asarray(idx)]
        try:
            report.scalars["sync_surrogate"] = sync_metric(env, rendered, spec)
        except UndefinedMetricError as e:
            log.warning("sync metric undefined: %s", e)
            report.scalars["sync_surrogate"] = float("nan")
        report.series["sync_surrogate"] = [report.scalars["sync_surrogate"]]
    return report
