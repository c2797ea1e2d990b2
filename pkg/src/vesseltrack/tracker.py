"""Bidirectional iterative centerline tracking from a single seed point."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import cnn
from .centerline import Centerline
from .errors import ValidationError
from .sphere import DirectionCodebook, cone_indices, normalized_entropy
from .volume import Volume, extract_patch


@dataclass(frozen=True)
class TrackerConfig:
    entropy_threshold: float = 0.9
    entropy_window: int = 3
    cone_angle: float = 60.0
    opposing_min_angle: float = 90.0
    max_length_mm: float = 275.0
    min_step_mm: float = 0.25
    max_steps: int = 2000
    # most recent points of the current half ignored by the self-proximity test
    self_exclusion: int = 5

    def __post_init__(self):
        # a zero threshold is allowed: it forces termination as soon as any
        # entropy has been recorded
        if not 0.0 <= self.entropy_threshold <= 1.0:
            raise ValidationError("entropy threshold must lie in [0, 1]")
        if self.entropy_window < 1 or self.max_steps < 1 or self.self_exclusion < 0:
            raise ValidationError("window, step limit and exclusion count must be positive")
        if not 0 < self.cone_angle < self.opposing_min_angle < 180:
            raise ValidationError("need 0 < cone angle < opposing angle < 180")
        if not (self.min_step_mm > 0 and self.max_length_mm > 0):
            raise ValidationError("step and length limits must be positive")


@dataclass
class Evaluation:
    probs: np.ndarray
    radius: float
    entropy: float


class Tracker:
    """Frozen network plus the volume it tracks in; counts network evaluations."""

    def __init__(self, vol: Volume, params: cnn.NetworkParams, cb: DirectionCodebook,
                 cfg: TrackerConfig | None = None):
        if params.spec.head != "tracker" or params.spec.num_directions != cb.n:
            raise ValidationError("tracker weights do not match the codebook")
        self.vol = vol
        self.params = params
        self.cb = cb
        self.cfg = cfg or TrackerConfig()
        self.evaluations = 0
        self._cones: dict[int, np.ndarray] = {}
        lo, hi = vol.bounds()
        half = params.patch.half_extent_mm
        self._lo, self._hi = lo - half, hi + half

    def evaluate(self, pos) -> Evaluation:
        patch = extract_patch(self.vol, pos, self.params.patch)
        out = cnn.split_tracker_output(self.params, cnn.infer(self.params, patch.values))
        self.evaluations += 1
        probs = out.probs.reshape(-1)
        return Evaluation(probs, float(out.radius.reshape(-1)[0]), normalized_entropy(probs))

    def patch_in_volume(self, pos) -> bool:
        """True while the patch box around ``pos`` still overlaps the volume."""
        pos = np.asarray(pos, dtype=float)
        return bool(np.all(pos >= self._lo) and np.all(pos <= self._hi))

    def cone(self, d: int) -> np.ndarray:
        if d not in self._cones:
            self._cones[d] = cone_indices(self.cb, d, self.cfg.cone_angle)
        return self._cones[d]

    def step_length(self, radius: float) -> float:
        return max(radius, self.cfg.min_step_mm)

    def next_direction(self, probs, prev_dir: int) -> int:
        cone = self.cone(prev_dir)
        return int(cone[np.argmax(probs[cone])])


def initial_directions(probs, cb: DirectionCodebook, min_angle: float = 90.0) -> tuple[int, int]:
    """Global maximum and the best direction at least ``min_angle`` away from it."""
    probs = np.asarray(probs, dtype=float)
    d0 = int(np.argmax(probs))
    far = np.flatnonzero(cb.angles_to(d0) >= min_angle - 1e-9)
    if len(far) == 0:
        raise ValidationError(f"no codebook direction at least {min_angle} degrees from the maximum")
    d1 = int(far[np.argmax(probs[far])])
    return d0, d1


@dataclass
class StepResult:
    position: np.ndarray
    direction: int
    radius: float
    entropy: float
    stop: str | None = None


def step(vol: Volume, params: cnn.NetworkParams, cb: DirectionCodebook, cfg: TrackerConfig, pos, prev_dir: int,
         radius: float | None = None, tracker: Tracker | None = None) -> StepResult:
    """One tracking step from ``pos`` (heading ``prev_dir``).

    The network is evaluated at ``pos`` unless ``radius`` (the radius already
    predicted there) is given, in which case only the move is made and the
    new position evaluated. Returns the new position, the chosen direction
    at it, and its radius and entropy; ``stop="bounds"`` when the new patch
    no longer touches the volume.
    """
    t = tracker or Tracker(vol, params, cb, cfg)
    pos = np.asarray(pos, dtype=float)
    if radius is None:
        ev = t.evaluate(pos)
        prev_dir = t.next_direction(ev.probs, prev_dir)
        radius = ev.radius
    new = pos + t.step_length(radius) * cb.dirs[prev_dir]
    if not t.patch_in_volume(new):
        return StepResult(new, prev_dir, float("nan"), float("nan"), "bounds")
    ev = t.evaluate(new)
    return StepResult(new, t.next_direction(ev.probs, prev_dir), ev.radius, ev.entropy)


def self_proximity_stop(current, line, current_radius: float, exclusion_count: int) -> bool:
    """True if ``current`` is closer than ``current_radius`` to a point older
    than the last ``exclusion_count`` points of ``line``."""
    line = np.asarray(line, dtype=float).reshape(-1, 3)
    older = line[:max(len(line) - exclusion_count, 0)]
    if len(older) == 0:
        return False
    return bool(np.min(np.linalg.norm(older - np.asarray(current, dtype=float), axis=1)) < current_radius)


@dataclass
class HalfTrack:
    points: list
    radii: list
    entropies: list
    stop: str


def _half_track(t: Tracker, seed, seed_radius: float, direction: int, other: np.ndarray) -> HalfTrack:
    cfg = t.cfg
    trail = [np.asarray(seed, dtype=float)]
    pts, radii, ents = [], [], []
    pos, radius, d = trail[0], seed_radius, direction
    for _ in range(cfg.max_steps):
        new = pos + t.step_length(radius) * t.cb.dirs[d]
        if not t.patch_in_volume(new):
            return HalfTrack(pts, radii, ents, "bounds")
        if self_proximity_stop(new, trail, radius, cfg.self_exclusion) or (
                len(other) and np.min(np.linalg.norm(other - new, axis=1)) < radius):
            return HalfTrack(pts, radii, ents, "self-proximity")
        ev = t.evaluate(new)
        trail.append(new)
        pts.append(new)
        radii.append(ev.radius)
        ents.append(ev.entropy)
        pos, radius, d = new, ev.radius, t.next_direction(ev.probs, d)
        if np.mean(ents[-cfg.entropy_window:]) > cfg.entropy_threshold:
            return HalfTrack(pts, radii, ents, "entropy")
    return HalfTrack(pts, radii, ents, "max-steps")


def track(vol: Volume, params: cnn.NetworkParams, cb: DirectionCodebook, cfg: TrackerConfig | None, seed,
          tracker: Tracker | None = None, postprocessing: bool = True) -> Centerline:
    """Track both ways from ``seed``; the result runs from the end of the
    first half (direction d0) through the seed to the end of the second."""
    t = tracker or Tracker(vol, params, cb, cfg)
    cfg = t.cfg
    seed = np.asarray(seed, dtype=float).reshape(3)
    if not vol.contains(seed):
        raise ValidationError(f"seed {seed.tolist()} lies outside the volume")
    start = t.evaluations
    ev = t.evaluate(seed)
    d0, d1 = initial_directions(ev.probs, cb, cfg.opposing_min_angle)
    first = _half_track(t, seed, ev.radius, d0, np.zeros((0, 3)))
    second = _half_track(t, seed, ev.radius, d1, np.array(first.points).reshape(-1, 3))
    points = first.points[::-1] + [seed] + second.points
    radii = first.radii[::-1] + [ev.radius] + second.radii
    ents = first.entropies[::-1] + [ev.entropy] + second.entropies
    cl = Centerline(np.array(points), np.array(radii), np.array(ents), first.stop, second.stop, seed,
                    len(first.points), t.evaluations - start)
    return postprocess(cl, cfg) if postprocessing else cl


def postprocess(cl: Centerline, cfg: TrackerConfig) -> Centerline:
    """Limit overlong lines to the length budget, then prune at the thinnest point.

    Lines within budget pass unchanged. Longer ones lose equal arc length
    at both ends until they fit; the result is then cut at its minimum
    predicted radius and the longer piece is kept.
    """
    if cl.length <= cfg.max_length_mm:
        return cl
    seg = np.linalg.norm(np.diff(cl.points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    excess = (s[-1] - cfg.max_length_mm) / 2.0
    keep = np.flatnonzero((s >= excess - 1e-9) & (s <= s[-1] - excess + 1e-9))
    lo, hi = int(keep[0]), int(keep[-1]) + 1
    cut = lo + int(np.argmin(cl.radii[lo:hi]))
    if s[cut] - s[lo] >= s[hi - 1] - s[cut]:
        hi = cut + 1
    else:
        lo = cut
    return replace(cl, points=cl.points[lo:hi], radii=cl.radii[lo:hi], entropies=cl.entropies[lo:hi],
                   seed_index=min(max(cl.seed_index - lo, 0), hi - lo - 1))
