"""Fully automatic extraction: ostium and seed detection on predicted
proximity maps, then queue-based tracking that keeps lines reaching an ostium."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree

from . import cnn
from .centerline import Centerline, write_centerline
from .errors import VesselTrackError, ValidationError
from .proximity import (
    OSTIA_PROXIMITY,
    SEED_PROXIMITY,
    ProximityConfig,
    predict_proximity_map,
    proximity_target,
)
from .sphere import DirectionCodebook
from .tracker import Tracker, TrackerConfig, track
from .volume import Volume, voxel_to_world


class TreeExtractionError(VesselTrackError):
    pass


@dataclass(frozen=True)
class TreeConfig:
    num_seeds: int = 200
    ostia_count: int = 2
    # a line "reaches" an ostium when one of its points is this close
    reach_radius_mm: float = 5.0
    # seeds must look no farther than this from a centerline
    seed_max_distance_mm: float = 2.0
    max_lines: int | None = None
    # seeds covered by rejected lines are dropped too
    prune_rejected: bool = True

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ValidationError("need at least one seed")
        if self.ostia_count != 2:
            raise ValidationError("exactly two ostia are detected")
        if not (self.reach_radius_mm > 0 and self.seed_max_distance_mm >= 0):
            raise ValidationError("reach radius must be positive")


def seed_min_value(cfg: TreeConfig, pcfg: ProximityConfig = SEED_PROXIMITY) -> float:
    return float(proximity_target(min(cfg.seed_max_distance_mm, pcfg.d_max), pcfg))


def local_maxima(pmap: Volume, k: int, min_value: float = -np.inf):
    """Up to ``k`` strict 26-neighbourhood maxima above ``min_value``.

    Returns ``(world_points, values)`` sorted by descending value, ties
    broken by lexicographic voxel index. Voxels outside the grid count as
    lower than everything.
    """
    if k < 1:
        raise ValidationError("k must be at least 1")
    data = np.asarray(pmap.data, dtype=np.float64)
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neigh = maximum_filter(data, footprint=footprint, mode="constant", cval=-np.inf)
    idx = np.argwhere((data > neigh) & (data > min_value))
    if len(idx) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    vals = data[tuple(idx.T)]
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], -vals))[:k]
    return voxel_to_world(pmap, idx[order]), vals[order]


@dataclass
class TreeLine:
    centerline: Centerline
    accepted: bool
    seed_value: float


@dataclass
class TreeResult:
    ostia: np.ndarray
    ostia_values: np.ndarray
    lines: list[TreeLine] = field(default_factory=list)
    seeds: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    seed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    consumed: int = 0

    @property
    def accepted(self) -> list[Centerline]:
        return [ln.centerline for ln in self.lines if ln.accepted]

    @property
    def tracker_runs(self) -> int:
        return len(self.lines)


def _config_of(params: cnn.NetworkParams, fallback: ProximityConfig) -> ProximityConfig:
    m = params.meta
    return ProximityConfig(float(m.get("a", fallback.a)), float(m.get("d_max", fallback.d_max)),
                           float(m.get("spacing", fallback.spacing)))


def reaches_ostium(cl: Centerline, ostia, reach: float) -> bool:
    if len(cl) == 0 or len(ostia) == 0:
        return False
    return bool(np.min(cKDTree(cl.points).query(np.asarray(ostia).reshape(-1, 3))[0]) <= reach)


def covered(points, cl: Centerline, min_radius: float) -> np.ndarray:
    """Which of ``points`` lie within the local predicted radius of ``cl``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(cl) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    dist, near = cKDTree(cl.points).query(points)
    return dist <= np.maximum(cl.radii[near], min_radius)


def extract_tree(vol: Volume, tracker_params: cnn.NetworkParams, seed_params: cnn.NetworkParams,
                 ostia_params: cnn.NetworkParams, cb: DirectionCodebook, cfg: TreeConfig | None = None,
                 tcfg: TrackerConfig | None = None) -> TreeResult:
    """Detect ostia and seeds, then track seeds in order of decreasing proximity.

    A line is accepted when it reaches an ostium; accepted lines remove
    every queued seed lying within their local predicted radius (never
    closer than the seed grid spacing), and so do rejected lines when
    ``cfg.prune_rejected`` is set.
    """
    cfg = cfg or TreeConfig()
    spcfg = _config_of(seed_params, SEED_PROXIMITY)
    opcfg = _config_of(ostia_params, OSTIA_PROXIMITY)
    omap = predict_proximity_map(vol, ostia_params, opcfg)
    ostia, ovals = local_maxima(omap, cfg.ostia_count)
    if len(ostia) < cfg.ostia_count:
        raise TreeExtractionError(f"found {len(ostia)} ostium candidates, need {cfg.ostia_count}")
    smap = predict_proximity_map(vol, seed_params, spcfg)
    seeds, svals = local_maxima(smap, cfg.num_seeds, seed_min_value(cfg, spcfg))
    inside = np.array([vol.contains(p) for p in seeds], dtype=bool)
    seeds, svals = seeds[inside], svals[inside]
    result = TreeResult(ostia, ovals, seeds=seeds, seed_values=svals)
    tracker = Tracker(vol, tracker_params, cb, tcfg)
    alive = np.ones(len(seeds), dtype=bool)
    for i in range(len(seeds)):
        if not alive[i]:
            continue
        if cfg.max_lines is not None and len(result.accepted) >= cfg.max_lines:
            break
        alive[i] = False
        cl = track(vol, tracker_params, cb, tracker.cfg, seeds[i], tracker=tracker)
        ok = reaches_ostium(cl, ostia, cfg.reach_radius_mm)
        result.lines.append(TreeLine(cl, ok, float(svals[i])))
        if ok or cfg.prune_rejected:
            hit = alive & covered(seeds, cl, spcfg.spacing)
            result.consumed += int(hit.sum())
            alive &= ~hit
    return result


def write_tree(result: TreeResult, out_dir) -> None:
    """One VTE1 file per tracked line plus a plain-text manifest."""
    os.makedirs(out_dir, exist_ok=True)
    rows = ["# vesseltrack tree manifest"]
    for o, v in zip(result.ostia, result.ostia_values):
        rows.append(f"ostium {float(o[0])!r} {float(o[1])!r} {float(o[2])!r} value {float(v)!r}")
    for n, ln in enumerate(result.lines):
        name = f"line_{n:03d}.vte"
        write_centerline(ln.centerline, os.path.join(out_dir, name))
        status = "accepted" if ln.accepted else "rejected"
        s = ln.centerline.seed
        seed = " ".join(repr(float(v)) for v in s)
        rows.append(f"line {name} {status} seed {seed} value {float(ln.seed_value)!r}")
    rows.append(f"consumed_seeds {result.consumed}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(rows) + "\n")


def read_manifest(path):
    ostia, lines = [], []
    with open(path) as fh:
        for ln in fh:
            parts = ln.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "ostium":
                ostia.append([float(v) for v in parts[1:4]])
            elif parts[0] == "line":
                lines.append((parts[1], parts[2] == "accepted"))
    return np.array(ostia).reshape(-1, 3), lines
