"""Polyline centerlines with radii, arc-length queries and text formats.

``CenterlineRef`` is an annotated reference line; ``Centerline`` is a traced
line that additionally carries per-point entropies and the reason each end
stopped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, HeaderError, ValidationError

STOP_REASONS = ("entropy", "self-proximity", "bounds", "max-steps", "none")


@dataclass
class CenterlineRef:
    points: np.ndarray
    radii: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(self.points) < 2:
            raise ValidationError("a reference centerline needs at least 2 points")
        if len(self.radii) != len(self.points):
            raise ValidationError("one radius per point required")
        if np.any(self.radii <= 0):
            raise ValidationError("radii must be positive")
        if np.any(np.linalg.norm(np.diff(self.points, axis=0), axis=1) == 0):
            raise ValidationError("consecutive centerline points must be distinct")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self._cum = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def arclength(self) -> np.ndarray:
        return self._cum

    @property
    def closed(self) -> bool:
        """A polyline whose last point repeats the first is a closed loop."""
        return bool(np.allclose(self.points[0], self.points[-1], rtol=0, atol=1e-9))

    def wrap(self, s):
        """Map arc lengths onto the line: modulo for loops, clamped otherwise."""
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s) -> np.ndarray:
        return point_at_arclength(self, s)

    def radius_at(self, s) -> np.ndarray:
        return np.interp(self.wrap(s), self._cum, self.radii)

    def project(self, x):
        """Closest point on the polyline to each query; returns (s, distance)."""
        return project_to_polyline(self.points, self._cum, x)

    def resample(self, step: float) -> "CenterlineRef":
        s = resample_positions(self.length, step)
        return CenterlineRef(self.point_at(s), self.radius_at(s), self.name)


def resample_positions(length: float, step: float) -> np.ndarray:
    n = int(np.floor(length / step + 1e-9))
    s = np.arange(n + 1) * step
    if length - s[-1] > 1e-9:
        s = np.append(s, length)
    return s


def point_at_arclength(cl: CenterlineRef, s) -> np.ndarray:
    """Linear interpolation along the polyline.

    ``s`` is clamped to [0, length], or taken modulo the length for loops.
    """
    s = cl.wrap(s)
    return np.stack([np.interp(s, cl.arclength, cl.points[:, i]) for i in range(3)], axis=-1)


def project_to_polyline(points: np.ndarray, cum: np.ndarray, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    a = points[:-1]
    d = points[1:] - points[:-1]
    seg_len2 = np.einsum("ij,ij->i", d, d)
    # (queries, segments) parameter of the perpendicular foot
    t = np.einsum("qsj,sj->qs", x[:, None, :] - a[None], d) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    dist2 = np.sum((x[:, None, :] - foot) ** 2, axis=-1)
    best = np.argmin(dist2, axis=1)
    rows = np.arange(len(x))
    s = cum[best] + t[rows, best] * np.sqrt(seg_len2[best])
    dist = np.sqrt(dist2[rows, best])
    if single:
        return float(s[0]), float(dist[0])
    return s, dist


@dataclass
class Centerline:
    points: np.ndarray
    radii: np.ndarray
    entropies: np.ndarray
    stop_fwd: str = "none"
    stop_bwd: str = "none"
    seed: np.ndarray = field(default_factory=lambda: np.zeros(3))
    seed_index: int = 0
    # network evaluations spent producing the line (0 when read from disk)
    evaluations: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.entropies = np.asarray(self.entropies, dtype=float).reshape(-1)
        self.seed = np.asarray(self.seed, dtype=float).reshape(3)
        if not (len(self.points) == len(self.radii) == len(self.entropies)):
            raise ValidationError("points, radii and entropies must have equal length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def length(self) -> float:
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def as_ref(self) -> CenterlineRef:
        """Drop duplicate points and view as a reference polyline."""
        keep = np.concatenate([[True], np.linalg.norm(np.diff(self.points, axis=0), axis=1) > 0])
        return CenterlineRef(self.points[keep], np.maximum(self.radii[keep], 1e-6))


def dense_samples(refs, step: float = 0.1):
    """Points, radii and owning-line index of all refs resampled at ``step``."""
    pts, rad, owner = [], [], []
    for i, ref in enumerate(refs):
        s = resample_positions(ref.length, step)
        pts.append(ref.point_at(s))
        rad.append(ref.radius_at(s))
        owner.append(np.full(len(s), i))
    return np.concatenate(pts), np.concatenate(rad), np.concatenate(owner)


class CenterlineIndex:
    """Nearest-centerline lookups over a set of reference lines."""

    def __init__(self, refs, step: float = 0.1):
        self.refs = list(refs)
        self.points, self.radii, self.owner = dense_samples(self.refs, step)
        self.tree = cKDTree(self.points)

    def nearest(self, x):
        """Distance, local radius and owning line of the nearest dense sample."""
        dist, idx = self.tree.query(np.asarray(x, dtype=float))
        return dist, self.radii[idx], self.owner[idx]


# --------------------------------------------------------------------------
# text formats


def write_refs(refs, path) -> None:
    with open(path, "w") as fh:
        fh.write("VTC1\n")
        for i, ref in enumerate(refs):
            fh.write(f"branch {ref.name or i}\n")
            for p, r in zip(ref.points, ref.radii):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(r)!r}\n")


def read_refs(path) -> list[CenterlineRef]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "VTC1":
        raise HeaderError(f"{path}: not a VTC1 file")
    refs, name, rows = [], None, []

    def flush():
        if name is not None:
            arr = np.array(rows, dtype=float).reshape(-1, 4)
            refs.append(CenterlineRef(arr[:, :3], arr[:, 3], name))

    for ln in lines[1:]:
        if ln.startswith("branch"):
            flush()
            name, rows = ln.partition(" ")[2].strip(), []
            continue
        if name is None:
            raise FormatError(f"point line before any branch: {ln!r}")
        parts = ln.split()
        if len(parts) != 4:
            raise FormatError(f"expected 'x y z r', got {ln!r}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise FormatError(f"bad number in {ln!r}") from exc
    flush()
    return refs


def write_centerline(cl: Centerline, path) -> None:
    with open(path, "w") as fh:
        fh.write("VTE1\n")
        fh.write(f"meta seed {float(cl.seed[0])!r} {float(cl.seed[1])!r} {float(cl.seed[2])!r}\n")
        fh.write(f"meta stop_fwd {cl.stop_fwd}\n")
        fh.write(f"meta stop_bwd {cl.stop_bwd}\n")
        for p, r, h in zip(cl.points, cl.radii, cl.entropies):
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(r)!r} {float(h)!r}\n")


def read_centerline(path) -> Centerline:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "VTE1":
        raise HeaderError(f"{path}: not a VTE1 file")
    meta, rows = {}, []
    for ln in lines[1:]:
        if ln.startswith("meta "):
            _, key, value = ln.split(" ", 2)
            meta[key] = value
            continue
        parts = ln.split()
        if len(parts) != 5:
            raise FormatError(f"expected 'x y z r H', got {ln!r}")
        rows.append([float(v) for v in parts])
    for key in ("seed", "stop_fwd", "stop_bwd"):
        if key not in meta:
            raise HeaderError(f"missing meta {key}")
    arr = np.array(rows, dtype=float).reshape(-1, 5)
    seed = np.array([float(v) for v in meta["seed"].split()])
    return Centerline(arr[:, :3], arr[:, 3], arr[:, 4], meta["stop_fwd"], meta["stop_bwd"], seed)
