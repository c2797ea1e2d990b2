"""Synthetic tubular phantoms with analytically known centerlines.

A phantom is a set of annotated branches (smooth curves with a radius
profile, optionally attached to a parent branch) plus unannotated structures
such as an aorta-like trunk, vein-like tubes or bright blobs. Rasterization
gives each tube a one-voxel linear boundary band and adds Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .centerline import CenterlineRef
from .errors import FormatError, ValidationError
from .volume import Volume

CURVE_STEP_MM = 0.1


@dataclass
class BranchSpec:
    control_points: np.ndarray
    radii: np.ndarray
    intensity: float = 1.0
    parent: int = -1
    attach: float = 0.0
    closed: bool = False

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(self.control_points) < 2 or len(self.radii) != len(self.control_points):
            raise ValidationError("branch needs >= 2 control points and one radius each")
        if np.any(self.radii <= 0):
            raise ValidationError("branch radii must be positive")
        if not 0.0 <= self.attach <= 1.0:
            raise ValidationError("attachment parameter must lie in [0, 1]")


@dataclass
class StructureSpec:
    """Unannotated structure: ``tube`` along control points or ``blob`` at one point."""

    kind: str
    points: np.ndarray
    radius: float
    intensity: float = 1.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.kind not in ("tube", "blob"):
            raise ValidationError(f"unknown structure kind {self.kind!r}")
        if self.kind == "tube" and len(self.points) < 2:
            raise ValidationError("tube structure needs >= 2 points")
        if self.radius <= 0:
            raise ValidationError("structure radius must be positive")


@dataclass
class GapSpec:
    branch: int
    start_mm: float
    length_mm: float


@dataclass
class PhantomSpec:
    name: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background: float = 0.0
    noise: float = 0.0
    seed: int = 0
    branches: list[BranchSpec] = field(default_factory=list)
    structures: list[StructureSpec] = field(default_factory=list)
    gaps: list[GapSpec] = field(default_factory=list)


# --------------------------------------------------------------------------
# curves


def _spline_samples(control: np.ndarray, closed: bool):
    """Dense samples of the interpolating cubic; returns (points, params, control params)."""
    if closed:
        if not np.allclose(control[0], control[-1]):
            control = np.vstack([control, control[:1]])
    chord = np.linalg.norm(np.diff(control, axis=0), axis=1)
    if np.any(chord <= 0):
        raise ValidationError("control points must be distinct")
    t_ctrl = np.concatenate([[0.0], np.cumsum(chord)])
    n = max(int(np.ceil(t_ctrl[-1] / CURVE_STEP_MM)), 1)
    grid = np.linspace(0.0, t_ctrl[-1], n + 1)
    near = np.abs(grid[:, None] - t_ctrl[None]).min(axis=1) < 1e-3 * CURVE_STEP_MM
    t = np.union1d(grid[~near], t_ctrl)
    if len(control) == 2:
        pts = control[0] + (t / t_ctrl[-1])[:, None] * (control[1] - control[0])
    else:
        spline = CubicSpline(t_ctrl, control, bc_type="periodic" if closed else "natural")
        pts = spline(t)
        # nodes exactly, not spline round-off
        pts[np.searchsorted(t, t_ctrl)] = control
    return pts, t, t_ctrl


def branch_geometry(spec: PhantomSpec):
    """Resolve attachments and return one dense ``CenterlineRef`` per branch."""
    refs: list[CenterlineRef] = []
    for i, br in enumerate(spec.branches):
        control = br.control_points.copy()
        radii = br.radii.copy()
        if br.parent >= 0:
            if br.parent >= i:
                raise ValidationError("a parent branch must precede its children")
            parent = refs[br.parent]
            control[0] = parent.point_at(br.attach * parent.length)
        closed = br.closed
        if closed and not np.allclose(control[0], control[-1]):
            control = np.vstack([control, control[:1]])
            radii = np.append(radii, radii[0])
        pts, t, t_ctrl = _spline_samples(control, closed)
        r = np.interp(t, t_ctrl, radii)
        refs.append(CenterlineRef(pts, r, name=str(i)))
    return refs


def _tube_samples(points: np.ndarray, radius: float):
    pts, _, _ = _spline_samples(points, False)
    return pts, np.full(len(pts), radius)


def check_bounds(spec: PhantomSpec, refs) -> None:
    lo = np.array(spec.origin)
    hi = lo + (np.array(spec.dims) - 1) * np.array(spec.spacing)
    for i, ref in enumerate(refs):
        margin = 2 * ref.radii.max()
        if np.any(ref.points < lo + margin) or np.any(ref.points > hi - margin):
            raise ValidationError(f"{spec.name}: branch {i} leaves the volume (minus 2 radii)")


# --------------------------------------------------------------------------
# rasterization


def _paint(canvas: np.ndarray, axes, spacing, pts, radii, value, background, band, keep=None):
    """Max-composite a tube with a linear boundary band onto ``canvas``."""
    reach = radii.max() + band
    lo = np.maximum(((pts.min(axis=0) - reach - np.array([a[0] for a in axes])) / spacing).astype(int) - 1, 0)
    hi = np.minimum(((pts.max(axis=0) + reach - np.array([a[0] for a in axes])) / spacing).astype(int) + 2,
                    canvas.shape)
    if np.any(hi <= lo):
        return
    sub = [a[l:h] for a, l, h in zip(axes, lo, hi)]
    grid = np.stack(np.meshgrid(*sub, indexing="ij"), axis=-1).reshape(-1, 3)
    tree = cKDTree(pts)
    dist, idx = tree.query(grid, distance_upper_bound=reach)
    hit = np.isfinite(dist)
    cover = np.zeros(len(grid))
    r = radii[idx[hit]]
    cover[hit] = np.clip((r - dist[hit]) / band + 0.5, 0.0, 1.0)
    if keep is not None:
        cover[hit] *= keep[idx[hit]]
    block = canvas[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    vals = (background + cover * (value - background)).reshape(block.shape)
    if value >= background:
        np.maximum(block, vals, out=block)
    else:
        np.minimum(block, vals, out=block)


def rasterize(spec: PhantomSpec):
    """Render a phantom; returns ``(volume, refs, ostia)``.

    ``ostia`` holds the proximal endpoint of every root branch, shape (m, 3).
    """
    refs = branch_geometry(spec)
    check_bounds(spec, refs)
    spacing = np.array(spec.spacing, dtype=float)
    axes = [o + np.arange(n) * s for n, s, o in zip(spec.dims, spacing, spec.origin)]
    band = float(spacing.min())
    canvas = np.full(spec.dims, spec.background, dtype=np.float64)
    for st in spec.structures:
        if st.kind == "tube":
            pts, rad = _tube_samples(st.points, st.radius)
        else:
            pts, rad = st.points[:1], np.array([st.radius])
        _paint(canvas, axes, spacing, pts, rad, st.intensity, spec.background, band)
    for i, (br, ref) in enumerate(zip(spec.branches, refs)):
        keep = None
        gaps = [g for g in spec.gaps if g.branch == i]
        if gaps:
            s = ref.arclength
            keep = np.ones(len(s))
            for g in gaps:
                keep[(s >= g.start_mm) & (s <= g.start_mm + g.length_mm)] = 0.0
        _paint(canvas, axes, spacing, ref.points, ref.radii, br.intensity, spec.background, band, keep)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        canvas += rng.normal(0.0, spec.noise, size=canvas.shape)
    vol = Volume(canvas.astype(np.float32), tuple(spacing), spec.origin)
    roots = [ref.points[0] for br, ref in zip(spec.branches, refs) if br.parent < 0 and not br.closed]
    ostia = np.array(roots, dtype=float).reshape(-1, 3)
    return vol, refs, ostia


# --------------------------------------------------------------------------
# standard suites

SUITE_SIZES = {"straight": 7, "curved": 7, "branching": 8, "degraded": 4, "loop": 4}
BASE_SEEDS = {"straight": 1000, "curved": 2000, "branching": 3000, "degraded": 4000, "loop": 5000}


def _unit(v):
    return v / np.linalg.norm(v)


def _random_unit(rng):
    return _unit(rng.standard_normal(3))


def _perpendicular_pair(d, rng):
    a = _unit(np.cross(d, _random_unit(rng)))
    return a, np.cross(d, a)


def _polyline_distance(p, q):
    return cKDTree(p).query(q)[0].min()


def _place_tubes(rng, size_mm, count, curved_amp, margin=7.0, min_gap=5.0):
    """Random non-touching tubes inside a cube of side ``size_mm``."""
    tubes = []
    attempts = 0
    while len(tubes) < count:
        attempts += 1
        if attempts > 5000:
            raise RuntimeError("could not place tubes")
        length = rng.uniform(38.0, 50.0)
        d = _random_unit(rng)
        center = rng.uniform(margin + length / 2 * np.abs(d), size_mm - margin - length / 2 * np.abs(d))
        if np.any(margin + length / 2 * np.abs(d) > size_mm - margin - length / 2 * np.abs(d)):
            continue
        nctrl = 2 if curved_amp == 0 else 5
        s = np.linspace(-length / 2, length / 2, nctrl)
        ctrl = center + s[:, None] * d
        if curved_amp > 0:
            a, b = _perpendicular_pair(d, rng)
            phase = rng.uniform(0, 2 * np.pi)
            wiggle = curved_amp * np.sin(np.pi * (s / length + 0.5) * rng.uniform(1.0, 2.0) + phase)
            wiggle2 = 0.5 * curved_amp * np.cos(np.pi * (s / length + 0.5) * rng.uniform(1.0, 2.0) + phase)
            ctrl = ctrl + wiggle[:, None] * a + wiggle2[:, None] * b
        r0 = rng.uniform(1.2, 2.5)
        r1 = r0 * rng.uniform(0.7, 1.0)
        radii = np.linspace(r0, r1, nctrl)
        dense, _, _ = _spline_samples(ctrl, False)
        reach = 2 * r0
        if np.any(dense < margin - 2 + reach) or np.any(dense > size_mm - margin + 2 - reach):
            continue
        if any(_polyline_distance(t[2], dense) < min_gap + r0 + t[1].max() for t in tubes):
            continue
        tubes.append((ctrl, radii, dense))
    return [BranchSpec(c, r) for c, r, _ in tubes]


def _tube_suite(name: str, index: int, curved_amp: float, count: int = 4) -> PhantomSpec:
    seed = BASE_SEEDS[name] + index
    rng = np.random.default_rng(seed)
    size_mm = 64.0
    branches = _place_tubes(rng, size_mm, count, curved_amp)
    n = int(size_mm / 0.5) + 1
    return PhantomSpec(name=f"{name}-{index}", dims=(n, n, n), noise=float(rng.uniform(0.05, 0.15)),
                       seed=seed, branches=branches)


def _child_direction(parent_dir, angle_deg, rng, around=None):
    a, b = _perpendicular_pair(parent_dir, rng) if around is None else (around, np.cross(parent_dir, around))
    ang = np.radians(angle_deg)
    return _unit(np.cos(ang) * parent_dir + np.sin(ang) * a)


def _bent_segment(start, direction, length, rng, bend=0.15):
    a, _ = _perpendicular_pair(direction, rng)
    mid = start + direction * length / 2 + a * bend * length * rng.uniform(-1, 1)
    end = start + direction * length
    return np.array([start, mid, end])


def _branching(index: int) -> PhantomSpec:
    seed = BASE_SEEDS["branching"] + index
    rng = np.random.default_rng(seed)
    size = np.array([110.0, 64.0, 72.0])
    aorta_c = np.array([55.0, 32.0])
    aorta_r = rng.uniform(7.0, 8.5)
    structures = [StructureSpec("tube", [[aorta_c[0], aorta_c[1], -5.0], [aorta_c[0], aorta_c[1], size[2] + 5.0]],
                                aorta_r, 1.0)]
    branches: list[BranchSpec] = []
    for side in (-1.0, 1.0):
        z0 = rng.uniform(52.0, 60.0)
        out = _unit(np.array([side, rng.uniform(-0.3, 0.3), 0.0]))
        ostium = np.array([aorta_c[0], aorta_c[1], z0]) + out * aorta_r
        root_dir = _unit(out + np.array([0.0, 0.0, -rng.uniform(0.3, 0.6)]))
        r_root = rng.uniform(2.3, 2.6)
        ctrl = _bent_segment(ostium, root_dir, rng.uniform(12.0, 15.0), rng, 0.1)
        branches.append(BranchSpec(ctrl, [r_root, r_root * 0.96, r_root * 0.92]))
        root_idx = len(branches) - 1
        plane = _unit(np.cross(root_dir, np.array([0.0, 1.0, 0.0])))
        for c_sign in (-1.0, 1.0):
            c_dir = _child_direction(root_dir, c_sign * rng.uniform(30, 40), rng, around=plane)
            c_len = rng.uniform(14.0, 17.0)
            r_c = r_root * 0.9 * rng.uniform(0.85, 0.95)
            parent_end = branches[root_idx].control_points[-1]
            ctrl = _bent_segment(parent_end, c_dir, c_len, rng, 0.12)
            branches.append(BranchSpec(ctrl, [r_c, r_c * 0.92, r_c * 0.85], parent=root_idx, attach=1.0))
            c_idx = len(branches) - 1
            c_plane = _perpendicular_pair(c_dir, rng)[0]
            for g_sign in (-1.0, 1.0):
                g_dir = _child_direction(c_dir, g_sign * rng.uniform(28, 38), rng, around=c_plane)
                g_len = rng.uniform(11.0, 14.0)
                r_g = r_c * 0.85 * rng.uniform(0.9, 1.0)
                ctrl = _bent_segment(branches[c_idx].control_points[-1], g_dir, g_len, rng, 0.1)
                branches.append(BranchSpec(ctrl, [r_g, r_g * 0.85, r_g * 0.7], parent=c_idx, attach=1.0))
    # decoys: bright calcification-like blobs and a vein-like tube, none annotated
    refs = branch_geometry(PhantomSpec("tmp", (1, 1, 1), branches=branches))
    dense = np.concatenate([r.points for r in refs])
    tree = cKDTree(dense)
    placed = 0
    while placed < 3:
        p = rng.uniform([10.0, 8.0, 8.0], size - [10.0, 8.0, 8.0])
        if tree.query(p)[0] > 9.0 and np.hypot(*(p[:2] - aorta_c)) > aorta_r + 8.0:
            structures.append(StructureSpec("blob", [p], rng.uniform(1.5, 2.5), 1.3))
            placed += 1
    for _ in range(2000):
        start = rng.uniform([10.0, 8.0, 6.0], size - [10.0, 8.0, 6.0])
        d = _random_unit(rng)
        ctrl = _bent_segment(start, d, 22.0, rng, 0.1)
        vd = _spline_samples(ctrl, False)[0]
        if (np.all(vd > [6, 6, 6]) and np.all(vd < size - 6) and tree.query(vd)[0].min() > 10.0
                and np.hypot(vd[:, 0] - aorta_c[0], vd[:, 1] - aorta_c[1]).min() > aorta_r + 8.0):
            structures.append(StructureSpec("tube", ctrl, rng.uniform(1.4, 1.8), 0.9))
            break
    dims = tuple(int(s / 0.5) + 1 for s in size)
    return PhantomSpec(name=f"branching-{index}", dims=dims, noise=float(rng.uniform(0.05, 0.12)), seed=seed,
                       branches=branches, structures=structures)


def _degraded(index: int) -> PhantomSpec:
    spec = _tube_suite("degraded", index, curved_amp=3.0, count=3)
    rng = np.random.default_rng(BASE_SEEDS["degraded"] + 100 + index)
    refs = branch_geometry(spec)
    gaps = []
    for i, ref in enumerate(refs):
        for _ in range(int(rng.integers(1, 3))):
            length = float(rng.uniform(1.0, 3.0))
            start = float(rng.uniform(0.3, 0.7) * ref.length)
            gaps.append(GapSpec(i, round(start, 3), round(length, 3)))
    return replace(spec, gaps=gaps)


def _loop(index: int) -> PhantomSpec:
    seed = BASE_SEEDS["loop"] + index
    rng = np.random.default_rng(seed)
    size = 48.0
    ring = rng.uniform(12.0, 15.0)
    normal = _random_unit(rng)
    a, b = _perpendicular_pair(normal, rng)
    center = np.full(3, size / 2)
    ang = np.linspace(0.0, 2 * np.pi, 13)[:-1]
    ctrl = center + ring * (np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b)
    r = rng.uniform(1.5, 2.0)
    n = int(size / 0.5) + 1
    br = BranchSpec(ctrl, np.full(len(ctrl), r), closed=True)
    return PhantomSpec(name=f"loop-{index}", dims=(n, n, n), noise=float(rng.uniform(0.05, 0.1)), seed=seed,
                       branches=[br])


def make_suite(name: str, index: int) -> PhantomSpec:
    if name == "straight":
        return _tube_suite(name, index, 0.0)
    if name == "curved":
        # tortuosity grows with the index
        return _tube_suite(name, index, 1.5 + 1.0 * index)
    if name == "branching":
        return _branching(index)
    if name == "degraded":
        return _degraded(index)
    if name == "loop":
        return _loop(index)
    raise ValidationError(f"unknown suite {name!r}")


def standard_suites() -> dict[str, list[PhantomSpec]]:
    return {name: [make_suite(name, i) for i in range(n)] for name, n in SUITE_SIZES.items()}


TRAIN_SPLIT = {"straight": range(0, 4), "curved": range(0, 4), "branching": range(0, 6),
               "degraded": range(0, 4), "loop": range(0, 2)}
HELDOUT_SPLIT = {"straight": range(4, 7), "curved": range(4, 7), "branching": range(6, 8),
                 "loop": range(2, 4)}


def desk_split():
    """The 20 training and 10 held-out phantom specs used by the desk preset."""
    train = [make_suite(n, i) for n, idx in TRAIN_SPLIT.items() for i in idx]
    held = [make_suite(n, i) for n, idx in HELDOUT_SPLIT.items() for i in idx]
    return train, held


def suite_manifest(specs) -> str:
    lines = []
    for spec in specs:
        lines.append(f"phantom {spec.name} branches {len(spec.branches)} seed {spec.seed}")
        for g in spec.gaps:
            lines.append(f"gap {spec.name} branch {g.branch} start {g.start_mm} length {g.length_mm}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# spec files


def _fmt_points(pts) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in p) for p in np.asarray(pts).reshape(-1, 3))


def _parse_points(text: str) -> np.ndarray:
    return np.array([[float(v) for v in chunk.split()] for chunk in text.split(";")], dtype=float)


def write_spec(spec: PhantomSpec, path) -> None:
    out = [
        f"name={spec.name}",
        "dims=" + " ".join(str(int(d)) for d in spec.dims),
        "spacing=" + " ".join(repr(float(s)) for s in spec.spacing),
        "origin=" + " ".join(repr(float(o)) for o in spec.origin),
        f"background={float(spec.background)!r}",
        f"noise={float(spec.noise)!r}",
        f"seed={spec.seed}",
    ]
    for br in spec.branches:
        out += ["[branch]", f"points={_fmt_points(br.control_points)}",
                "radii=" + " ".join(repr(float(r)) for r in br.radii),
                f"intensity={float(br.intensity)!r}", f"parent={br.parent}", f"attach={float(br.attach)!r}",
                f"closed={int(br.closed)}"]
    for st in spec.structures:
        out += ["[structure]", f"kind={st.kind}", f"points={_fmt_points(st.points)}",
                f"radius={float(st.radius)!r}", f"intensity={float(st.intensity)!r}"]
    for g in spec.gaps:
        out += ["[gap]", f"branch={g.branch}", f"start={float(g.start_mm)!r}", f"length={float(g.length_mm)!r}"]
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def read_spec(path) -> PhantomSpec:
    top: dict[str, str] = {}
    blocks: list[tuple[str, dict]] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                blocks.append((line[1:-1], {}))
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"expected key=value, got {line!r}")
            (blocks[-1][1] if blocks else top)[key.strip()] = value.strip()
    try:
        spec = PhantomSpec(
            name=top.get("name", "phantom"),
            dims=tuple(int(v) for v in top["dims"].split()),
            spacing=tuple(float(v) for v in top.get("spacing", "0.5 0.5 0.5").split()),
            origin=tuple(float(v) for v in top.get("origin", "0 0 0").split()),
            background=float(top.get("background", 0.0)),
            noise=float(top.get("noise", 0.0)),
            seed=int(top.get("seed", 0)),
        )
        for kind, kv in blocks:
            if kind == "branch":
                spec.branches.append(BranchSpec(_parse_points(kv["points"]), [float(v) for v in kv["radii"].split()],
                                                float(kv.get("intensity", 1.0)), int(kv.get("parent", -1)),
                                                float(kv.get("attach", 0.0)), bool(int(kv.get("closed", 0)))))
            elif kind == "structure":
                spec.structures.append(StructureSpec(kv["kind"], _parse_points(kv["points"]), float(kv["radius"]),
                                                     float(kv.get("intensity", 1.0))))
            elif kind == "gap":
                spec.gaps.append(GapSpec(int(kv["branch"]), float(kv["start"]), float(kv["length"])))
            else:
                raise FormatError(f"unknown block [{kind}]")
    except KeyError as exc:
        raise FormatError(f"missing field {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise FormatError(str(exc)) from exc
    return spec
