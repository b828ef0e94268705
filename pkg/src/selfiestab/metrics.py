"""Stabilization quality: camera path, stability, cropping and distortion,
plus residual point motion.

All three scores lie in (0, 1] and larger is better.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mls import DEFAULT_CONFIG, MlsConfig, NodePair, mls_warp_points
from .tracks import FrameTracks

log = logging.getLogger(__name__)

LOW_BAND = (2, 6)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Similarity:
    scale: float
    angle: float              # radians
    translation: np.ndarray   # motion of the source centroid

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])


def similarity_fit(src, dst) -> Similarity:
    """Least-squares ``dst ~ s R src + t``. The reported translation is the
    displacement of the source centroid, which the fit maps exactly onto the
    target centroid."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    finite = np.all(np.isfinite(src), axis=1) & np.all(np.isfinite(dst), axis=1)
    src, dst = src[finite], dst[finite]
    if len(np.unique(src, axis=0)) < 3:
        raise MetricError("similarity fit needs at least 3 distinct correspondences")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    den = np.sum(a * a)
    if den <= 0:
        raise MetricError("degenerate correspondences")
    p = np.sum(a * b) / den
    q = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) / den
    return Similarity(float(np.hypot(p, q)), float(np.arctan2(q, p)), md - ms)


def camera_path(frames: Sequence[FrameTracks]) -> np.ndarray:
    """Cumulative inter-frame translation, ``(len(frames), 2)`` starting at 0."""
    if len(frames) < 2:
        raise MetricError("camera path needs at least two frames")
    steps = [np.zeros(2)]
    for f in frames[:-1]:
        if f.nodes_q_next is None:
            raise MetricError(f"frame {f.frame_index} has no correspondences")
        steps.append(similarity_fit(f.points_p, f.nodes_q_next).translation)
    return np.cumsum(np.array(steps), axis=0)


def _detrend(x: np.ndarray) -> np.ndarray:
    t = np.arange(len(x), dtype=np.float64)
    A = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(A, x, rcond=None)
    return x - A @ coef


def stability(path, band: tuple[int, int] = LOW_BAND, tol: float = 1e-9) -> float:
    """Share of the path's detrended spectral energy in the low band.

    Energies of the x and y axes are pooled, bins 0 and 1 are excluded from
    both the band and the total (which runs up to N/2). A path with no
    residual motion scores 1.
    """
    path = np.asarray(path, dtype=np.float64)
    if path.ndim != 2 or path.shape[1] != 2:
        raise MetricError("path must have shape (N, 2)")
    n = len(path)
    if n < 12:
        raise MetricError("stability needs a path of at least 12 frames")
    resid = _detrend(path)
    if np.sqrt(np.mean(resid ** 2)) < tol:
        return 1.0
    energy = (np.abs(np.fft.rfft(resid, axis=0)) ** 2).sum(axis=1)
    top = n // 2
    total = energy[2:top + 1].sum()
    low = energy[band[0]:min(band[1], top) + 1].sum()
    if total <= 0:
        return 1.0
    return float(low / total)


def warped_points(frames: Sequence[FrameTracks], pairs: Sequence[NodePair | None],
                  cfg: MlsConfig = DEFAULT_CONFIG) -> list[np.ndarray]:
    """Each frame's P moved by its node pair (identity for ``None``)."""
    if len(frames) != len(pairs):
        raise MetricError(f"{len(frames)} frames but {len(pairs)} node pairs")
    return [f.points_p.copy() if p is None else mls_warp_points(f.points_p, p, cfg)
            for f, p in zip(frames, pairs)]


def affine_fit(src, dst) -> np.ndarray:
    """Least-squares 2x3 affine ``dst ~ A src + b``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    X = np.column_stack([src, np.ones(len(src))])
    if np.linalg.matrix_rank(X) < 3:
        raise MetricError("affine fit needs non-collinear points")
    sol, *_ = np.linalg.lstsq(X, dst, rcond=None)
    return sol.T


def frame_scores(src, dst) -> tuple[float, float]:
    """Cropping and distortion of one frame from its affine fit."""
    A = affine_fit(src, dst)[:, :2]
    if np.array_equal(src, dst):
        return 1.0, 1.0
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] <= 0:
        raise MetricError("affine fit collapsed")
    return min(1.0, float(np.sqrt(abs(np.linalg.det(A))))), float(sv[1] / sv[0])


def cropping_distortion_series(inputs: Sequence[np.ndarray], outputs: Sequence[np.ndarray]):
    crop = np.full(len(inputs), np.nan)
    dist = np.full(len(inputs), np.nan)
    for k, (a, b) in enumerate(zip(inputs, outputs)):
        try:
            crop[k], dist[k] = frame_scores(a, b)
        except (MetricError, np.linalg.LinAlgError) as exc:
            log.warning("frame %d skipped: %s", k + 1, exc)
    if np.all(np.isnan(crop)):
        raise MetricError("no frame admitted an affine fit")
    return crop, dist


def cropping_distortion(frames: Sequence[FrameTracks], pairs: Sequence[NodePair | None],
                        cfg: MlsConfig = DEFAULT_CONFIG) -> tuple[float, float]:
    """Mean per-frame cropping and worst per-frame distortion."""
    crop, dist = cropping_distortion_series([f.points_p for f in frames],
                                            warped_points(frames, pairs, cfg))
    return float(np.nanmean(crop)), float(np.nanmin(dist))


def residual_motion(frames: Sequence[FrameTracks]) -> tuple[float, float]:
    """Mean point distance between consecutive frames: background
    (P_t against Q_{t+1}) and face (F_t against F_{t+1})."""
    bg, fg = [], []
    for a, b in zip(frames, frames[1:]):
        if a.nodes_q_next is not None:
            bg.append(np.linalg.norm(a.points_p - a.nodes_q_next, axis=1).mean())
        if a.face_valid and b.face_valid:
            fg.append(np.linalg.norm(a.face - b.face, axis=1).mean())
    return (float(np.mean(bg)) if bg else 0.0, float(np.mean(fg)) if fg else 0.0)


@dataclass(frozen=True)
class MetricReport:
    cropping: float
    distortion: float
    stability: float
    crop_series: np.ndarray
    distortion_series: np.ndarray
    path: np.ndarray


def evaluate(input_frames: Sequence[FrameTracks], output_frames: Sequence[FrameTracks]) -> MetricReport:
    """Scores of a stabilized sequence against its input. ``output_frames``
    hold stabilized P (index aligned with the input) and the next frame's
    stabilized nodes."""
    if len(input_frames) != len(output_frames):
        raise MetricError("input and output sequences differ in length")
    crop, dist = cropping_distortion_series([f.points_p for f in input_frames],
                                            [f.points_p for f in output_frames])
    path = camera_path(output_frames)
    return MetricReport(float(np.nanmean(crop)), float(np.nanmin(dist)), stability(path),
                        crop, dist, path)


def metrics_csv(report: MetricReport, frame_indices: Sequence[int] | None = None) -> str:
    """Per-frame rows plus a ``summary`` row holding cropping, distortion
    and stability (the last in both path columns)."""
    n = len(report.path)
    idx = list(range(1, n + 1)) if frame_indices is None else list(frame_indices)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "crop", "distort", "path_x", "path_y"])
    for k in range(n):
        w.writerow([idx[k], f"{report.crop_series[k]:.6f}", f"{report.distortion_series[k]:.6f}",
                    f"{report.path[k, 0]:.6f}", f"{report.path[k, 1]:.6f}"])
    w.writerow(["summary", f"{report.cropping:.6f}", f"{report.distortion:.6f}",
                f"{report.stability:.6f}", f"{report.stability:.6f}"])
    return buf.getvalue()
