"""Overlap and accuracy scores for extracted centerlines, marker hits and
Bland-Altman radius agreement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .centerline import Centerline, CenterlineRef, project_to_polyline
from .errors import ValidationError

SCORE_STEP_MM = 0.5
RELEVANT_RADIUS_MM = 0.75
OSTIUM_REACH_MM = 5.0


def _as_ref(line) -> CenterlineRef:
    if isinstance(line, CenterlineRef):
        return line
    if isinstance(line, Centerline):
        if len(line) == 0:
            raise ValidationError("extracted centerline is empty")
        if len(line) == 1 or line.length == 0:
            p = line.points[:1]
            return _PointLine(p, np.maximum(line.radii[:1], 1e-6))
        return line.as_ref()
    raise ValidationError(f"expected a centerline, got {type(line).__name__}")


class _PointLine:
    """Degenerate single-point line; resampling returns the point itself."""

    def __init__(self, points, radii):
        self.points, self.radii = points, radii

    def resample(self, step):
        return self


@dataclass
class Correspondence:
    ref_points: np.ndarray
    ref_radii: np.ndarray
    ref_tp: np.ndarray          # per reference sample: True = TP, False = FN
    ext_points: np.ndarray
    ext_radii: np.ndarray
    ext_tp: np.ndarray          # per extracted sample: True = TP, False = FP
    ext_nearest: np.ndarray     # index of the nearest reference sample
    ext_dist: np.ndarray        # distance to the reference polyline


def correspond(ref, ext, step: float = SCORE_STEP_MM) -> Correspondence:
    """Label resampled reference and extracted points as TP/FN and TP/FP."""
    r = _as_ref(ref).resample(step)
    e = _as_ref(ext).resample(step)
    dist_e, near = cKDTree(r.points).query(e.points)
    ext_tp = dist_e <= r.radii[near]
    dist_r, _ = cKDTree(e.points).query(r.points)
    ref_tp = dist_r <= r.radii
    if len(r.points) >= 2:
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(r.points, axis=0), axis=1))])
        _, poly = project_to_polyline(r.points, cum, e.points)
    else:
        poly = dist_e
    return Correspondence(r.points, r.radii, ref_tp, e.points, e.radii, ext_tp, near, np.asarray(poly))


def _overlap(tp_ext, tp_ref, fp, fn) -> float:
    total = tp_ext + tp_ref + fp + fn
    return float("nan") if total == 0 else 100.0 * (tp_ext + tp_ref) / total


@dataclass
class ScoreReport:
    ov: float
    of: float
    ot: float
    ai: float | None

    def row(self) -> str:
        ai = "undefined" if self.ai is None else f"{self.ai:.3f}"
        return f"{self.ov:6.1f} {self.of:6.1f} {self.ot:6.1f} {ai:>9}"


def overlap_scores(corr: Correspondence, relevant_radius: float = RELEVANT_RADIUS_MM) -> tuple[float, float, float]:
    """OV, OF and OT in percent.

    OF counts the reference samples before the first FN (walking from the
    first reference point) plus the extracted TP samples matched to them,
    relative to all reference samples plus all extracted TP samples; it is
    100 only for an error-free prefix match and 0 when the first reference
    sample is missed.
    """
    tp_e, tp_r = int(corr.ext_tp.sum()), int(corr.ref_tp.sum())
    fp, fn = len(corr.ext_tp) - tp_e, len(corr.ref_tp) - tp_r
    ov = _overlap(tp_e, tp_r, fp, fn)

    missed = np.flatnonzero(~corr.ref_tp)
    first = int(missed[0]) if len(missed) else len(corr.ref_tp)
    pre_e = int(np.sum(corr.ext_tp & (corr.ext_nearest < first)))
    of = 100.0 * (first + pre_e) / (len(corr.ref_tp) + tp_e)

    rel = corr.ref_radii >= relevant_radius
    rel_e = rel[corr.ext_nearest]
    ot = _overlap(int(np.sum(corr.ext_tp & rel_e)), int(np.sum(corr.ref_tp & rel)),
                  int(np.sum(~corr.ext_tp & rel_e)), int(np.sum(~corr.ref_tp & rel)))
    return ov, of, ot


def ai_accuracy(corr: Correspondence) -> float | None:
    """Mean distance of the TP extracted samples to the reference line; None without TPs."""
    if not np.any(corr.ext_tp):
        return None
    return float(np.mean(corr.ext_dist[corr.ext_tp]))


def score(ref, ext) -> ScoreReport:
    corr = correspond(ref, ext)
    return ScoreReport(*overlap_scores(corr), ai_accuracy(corr))


def marker_hits(markers, marker_radii, ext, ostia=None, reach: float = OSTIUM_REACH_MM) -> tuple[int, bool]:
    """Markers within their radius of an extracted point, and whether the
    line passes within ``reach`` of any ostium."""
    pts = np.asarray(ext.points if hasattr(ext, "points") else ext, dtype=float).reshape(-1, 3)
    markers = np.asarray(markers, dtype=float).reshape(-1, 3)
    radii = np.broadcast_to(np.asarray(marker_radii, dtype=float), (len(markers),))
    if len(pts) == 0:
        return 0, False
    tree = cKDTree(pts)
    hits = int(np.sum(tree.query(markers)[0] <= radii)) if len(markers) else 0
    reached = False
    if ostia is not None and len(np.asarray(ostia).reshape(-1, 3)):
        reached = bool(np.min(tree.query(np.asarray(ostia, dtype=float).reshape(-1, 3))[0]) <= reach)
    return hits, reached


def radius_pairs(corr: Correspondence) -> np.ndarray:
    """(extracted, reference) radius pairs over the TP extracted samples."""
    return np.stack([corr.ext_radii[corr.ext_tp], corr.ref_radii[corr.ext_nearest[corr.ext_tp]]], axis=1)


def bland_altman(pairs) -> tuple[float, float, float]:
    """Mean difference (auto - ref) and the 95% limits of agreement."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(pairs) < 2:
        raise ValidationError("Bland-Altman needs at least two pairs")
    diff = pairs[:, 0] - pairs[:, 1]
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    return mean, mean - 1.96 * sd, mean + 1.96 * sd
