"""Training-sample generation from sparse reference centerlines and the
optimization loops for the tracker and proximity networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import cnn
from .centerline import CenterlineIndex, CenterlineRef, point_at_arclength
from .errors import NumericalError, ValidationError
from .proximity import ProximityConfig, pad_for_network, target_map
from .sphere import DirectionCodebook, nearest_direction
from .volume import Patch, PatchSpec, Volume, extract_patch, extract_patches, resample_isotropic

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "TrainingData", "TrainingSample", "point_at_arclength", "make_reference_directions",
    "draw_sample", "draw_batch", "lr_at", "train", "train_proximity", "axis_rotation",
]


@dataclass(frozen=True)
class TrainConfig:
    lam_r: float = 10.0
    lam_w: float = 0.001
    batch_size: int = 64
    iterations: int = 50_000
    lr: float = 0.01
    lr_decay: float = 0.1
    lr_interval: int = 10_000
    translation_augment: bool = True
    rotation_augment: bool = True
    translation_sigma: float = 0.25
    # share of samples drawn away from every centerline with a uniform
    # direction target; 0 reproduces pure centerline sampling
    background_fraction: float = 0.0
    # share of those background samples placed just beyond a free line end
    end_fraction: float = 0.0

    def __post_init__(self):
        if self.lam_r < 0 or self.lam_w < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.batch_size < 1 or self.iterations < 0 or self.lr_interval < 1:
            raise ValidationError("batch size and decay interval must be positive")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1 and self.translation_sigma > 0):
            raise ValidationError("learning rate settings must be positive")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ValidationError("background fraction must lie in [0, 1)")
        if not 0.0 <= self.end_fraction <= 1.0:
            raise ValidationError("end fraction must lie in [0, 1]")


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * cfg.lr_decay ** (iteration // cfg.lr_interval)


@dataclass
class TrainingData:
    """One volume with its annotated centerlines (and optional ostia)."""

    volume: Volume
    refs: list[CenterlineRef]
    ostia: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    name: str = ""

    def __post_init__(self):
        self.ostia = np.asarray(self.ostia, dtype=float).reshape(-1, 3)
        self._index = None

    @property
    def index(self) -> CenterlineIndex:
        if self._index is None:
            self._index = CenterlineIndex(self.refs)
        return self._index


@dataclass
class TrainingSample:
    patch: Patch
    ref_dist: np.ndarray
    ref_radius: float
    anchor: np.ndarray
    radius_weight: float = 1.0


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def make_reference_directions(cl: CenterlineRef, x, r: float, cb: DirectionCodebook, rotation=None,
                              s_star: float | None = None) -> tuple[int, ...]:
    """Direction classes pointing from ``x`` to the line one radius up- and downstream.

    ``x`` is projected onto ``cl``; targets lie ``r`` further along the line in
    both travel directions (clamped at open ends). With ``rotation`` the
    displacement is expressed in the rotated patch frame. Returns the
    distinct classes; empty if both displacements vanish.
    """
    if not r > 0:
        raise ValidationError("reference step must be positive")
    x = np.asarray(x, dtype=float)
    if s_star is None:
        s_star, _ = cl.project(x)
    classes: list[int] = []
    for sign in (1.0, -1.0):
        delta = point_at_arclength(cl, s_star + sign * r) - x
        if np.linalg.norm(delta) < 1e-9:
            continue
        if rotation is not None:
            delta = np.asarray(rotation).T @ delta
        k = nearest_direction(cb, delta)
        if k not in classes:
            classes.append(k)
    return tuple(classes)


def reference_distribution(classes, n: int) -> np.ndarray:
    dist = np.zeros(n)
    if classes:
        dist[list(classes)] = 1.0 / len(classes)
    else:
        dist[:] = 1.0 / n
    return dist


def _random_rotation(cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray | None:
    if not cfg.rotation_augment:
        return None
    return axis_rotation(int(rng.integers(3)), float(rng.uniform(0.0, 2 * np.pi)))


def sample_geometry(refs, cfg: TrainConfig, cb: DirectionCodebook, rng: np.random.Generator, line: int | None = None):
    """Centre, rotation, classes and radius of one centerline sample (no image access)."""
    for _ in range(1000):
        k = int(rng.integers(len(refs))) if line is None else line
        cl = refs[k]
        s = float(rng.uniform(0.0, cl.length))
        anchor = point_at_arclength(cl, s)
        r_anchor = float(cl.radius_at(s))
        x, s_star = anchor, s
        if cfg.translation_augment:
            for _ in range(100):
                x = anchor + rng.normal(0.0, cfg.translation_sigma * r_anchor, 3)
                s_star, dist = cl.project(x)
                if dist <= 2.0 * r_anchor:
                    break
        r_star = float(cl.radius_at(s_star))
        rotation = _random_rotation(cfg, rng)
        classes = make_reference_directions(cl, x, r_star, cb, rotation, s_star=s_star)
        if classes:
            return {"center": x, "rotation": rotation, "classes": classes, "radius": r_star,
                    "anchor": anchor, "line": k, "radius_weight": 1.0}
    raise ValidationError("could not draw a sample with a defined direction")


def _beyond_end(data: TrainingData, rng: np.random.Generator) -> np.ndarray:
    """A point past one end of a random centerline, outside its rounded cap."""
    cl = data.refs[int(rng.integers(len(data.refs)))]
    if rng.random() < 0.5:
        end, inner = cl.points[0], point_at_arclength(cl, min(cl.length, 1.0))
        r = float(cl.radii[0])
    else:
        end, inner = cl.points[-1], point_at_arclength(cl, max(0.0, cl.length - 1.0))
        r = float(cl.radii[-1])
    out = end - inner
    out = out / max(np.linalg.norm(out), 1e-12)
    return end + out * rng.uniform(1.25, 3.0) * r + rng.normal(0.0, 0.5 * r, 3)


def background_geometry(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
    """A point off every annotated centerline: farther than two local radii, or
    just past a line end and outside every lumen."""
    lo, hi = data.volume.bounds()
    for _ in range(1000):
        at_end = cfg.end_fraction > 0 and rng.random() < cfg.end_fraction
        if at_end:
            x = _beyond_end(data, rng)
        elif rng.random() < 0.5:
            x = rng.uniform(lo, hi)
        else:
            cl = data.refs[int(rng.integers(len(data.refs)))]
            s = float(rng.uniform(0.0, cl.length))
            x = point_at_arclength(cl, s) + rng.normal(0.0, 3.0 * float(cl.radius_at(s)), 3)
        dist, r_near, _ = data.index.nearest(x)
        if dist > (1.25 if at_end else 2.0) * r_near and data.volume.contains(x):
            return {"center": x, "rotation": _random_rotation(cfg, rng), "classes": (), "radius": 1.0,
                    "anchor": x, "line": -1, "radius_weight": 0.0}
    raise ValidationError("could not find a background point")


def draw_sample(refs, vol: Volume, cfg: TrainConfig, spec: PatchSpec, cb: DirectionCodebook,
                rng: np.random.Generator) -> TrainingSample:
    if not refs:
        raise ValidationError("need at least one reference centerline")
    g = sample_geometry(refs, cfg, cb, rng)
    patch = extract_patch(vol, g["center"], spec, g["rotation"])
    return TrainingSample(patch, reference_distribution(g["classes"], cb.n), g["radius"], g["anchor"])


@dataclass
class Batch:
    patches: np.ndarray
    ref_dist: np.ndarray
    ref_radius: np.ndarray
    radius_weight: np.ndarray


def draw_batch(data: list[TrainingData], cfg: TrainConfig, spec: PatchSpec, cb: DirectionCodebook,
               rng: np.random.Generator, size: int | None = None) -> Batch:
    """Draw a batch; centerlines are chosen uniformly over all volumes."""
    size = cfg.batch_size if size is None else size
    lines = [(v, k) for v, d in enumerate(data) for k in range(len(d.refs))]
    geoms, owners = [], []
    for _ in range(size):
        if cfg.background_fraction > 0 and rng.random() < cfg.background_fraction:
            v = int(rng.integers(len(data)))
            geoms.append(background_geometry(data[v], cfg, rng))
        else:
            v, k = lines[int(rng.integers(len(lines)))]
            geoms.append(sample_geometry(data[v].refs, cfg, cb, rng, line=k))
        owners.append(v)
    w = spec.width
    patches = np.empty((size, w, w, w), dtype=np.float32)
    owners = np.array(owners)
    for v in np.unique(owners):
        idx = np.flatnonzero(owners == v)
        centers = np.array([geoms[i]["center"] for i in idx])
        rots = np.array([np.eye(3) if geoms[i]["rotation"] is None else geoms[i]["rotation"] for i in idx])
        patches[idx] = extract_patches(data[v].volume, centers, spec, rots)
    return Batch(
        patches,
        np.array([reference_distribution(g["classes"], cb.n) for g in geoms]),
        np.array([g["radius"] for g in geoms]),
        np.array([g["radius_weight"] for g in geoms]),
    )


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


def _check_finite(loss: float, iteration: int, lr: float, parts: dict, params: cnn.NetworkParams):
    if np.isfinite(loss):
        return
    bad = [(i, name) for i, name, arr in params.trainable() if not np.all(np.isfinite(arr))]
    state = {"iteration": iteration, "lr": lr, "loss": loss, "parts": parts, "nonfinite_tensors": bad}
    raise TrainingDiverged(f"non-finite loss at iteration {iteration}: {state}", state)


def train(data: list[TrainingData], cfg: TrainConfig, net_spec: cnn.NetworkSpec, cb: DirectionCodebook,
          patch: PatchSpec, seed: int = 0, progress=None):
    """Train a tracker network; returns ``(params, losses)``.

    Deterministic given ``seed``. ``progress`` is called as
    ``progress(iteration, loss)`` after every step.
    """
    if not data or not any(d.refs for d in data):
        raise ValidationError("training needs at least one annotated volume")
    if net_spec.head != "tracker" or net_spec.num_directions != cb.n:
        raise ValidationError("tracker training needs a tracker head sized to the codebook")
    if net_spec.field_width != patch.width:
        raise ValidationError(f"patch width {patch.width} != receptive field {net_spec.field_width}")
    rng = np.random.default_rng(seed)
    params = cnn.init_params(net_spec, rng, patch)
    state = cnn.AdamState()
    losses = []
    for it in range(cfg.iterations):
        batch = draw_batch(data, cfg, patch, cb, rng)
        out, cache = cnn.forward(params, batch.patches, train=True)
        loss, dout, parts = cnn.tracker_loss(params, out, batch.ref_dist, batch.ref_radius, cfg.lam_r, cfg.lam_w,
                                             batch.radius_weight)
        lr = lr_at(cfg, it)
        _check_finite(loss, it, lr, parts, params)
        grads = cnn.backward(params, cache, dout)
        cnn.add_weight_decay_grad(params, grads, cfg.lam_w)
        cnn.adam_step(params, grads, state, lr)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return params, np.array(losses)


# --------------------------------------------------------------------------
# proximity networks


@dataclass
class ProximityData:
    padded: np.ndarray
    target: np.ndarray
    hot: np.ndarray


def prepare_proximity(data: TrainingData, pcfg: ProximityConfig, field_width: int, pad_value: float,
                      targets: str = "centerlines") -> ProximityData:
    iso = resample_isotropic(data.volume, pcfg.spacing, pad_value)
    if targets == "centerlines":
        tmap = target_map(iso, pcfg, refs=data.refs)
    elif targets == "ostia":
        tmap = target_map(iso, pcfg, points=data.ostia)
    else:
        raise ValidationError(f"unknown proximity target {targets!r}")
    return ProximityData(pad_for_network(iso.data, field_width, pad_value), tmap.astype(np.float32),
                         np.argwhere(tmap > 0))


PROXIMITY_CROP = 7


def _proximity_batch(prepared: list[ProximityData], crops: int, field_width: int, rng):
    o = PROXIMITY_CROP
    inputs = np.empty((crops, o + field_width - 1, o + field_width - 1, o + field_width - 1), np.float32)
    targets = np.empty((crops, o, o, o), np.float32)
    for c in range(crops):
        pd = prepared[int(rng.integers(len(prepared)))]
        dims = np.array(pd.target.shape)
        if len(pd.hot) and rng.random() < 0.5:
            center = pd.hot[int(rng.integers(len(pd.hot)))]
        else:
            center = rng.integers(0, dims)
        start = np.clip(center - o // 2, 0, np.maximum(dims - o, 0))
        sx, sy, sz = start
        inputs[c] = pd.padded[sx:sx + o + field_width - 1, sy:sy + o + field_width - 1, sz:sz + o + field_width - 1]
        targets[c] = pd.target[sx:sx + o, sy:sy + o, sz:sz + o]
    return inputs, targets


def train_proximity(data: list[TrainingData], cfg: TrainConfig, net_spec: cnn.NetworkSpec, pcfg: ProximityConfig,
                    targets: str = "centerlines", seed: int = 0, progress=None):
    """Fully convolutional proximity regression on crops of isotropic volumes.

    Each iteration uses ``batch_size // 4`` crops whose central 7^3 outputs
    are regressed; half of the crops are centred where the target is
    positive.
    """
    if net_spec.head != "proximity":
        raise ValidationError("proximity training needs a proximity head")
    fw = net_spec.field_width
    patch = PatchSpec(fw, pcfg.spacing, 0.0)
    rng = np.random.default_rng(seed)
    params = cnn.init_params(net_spec, rng, patch)
    params.meta.update(a=repr(pcfg.a), d_max=repr(pcfg.d_max), spacing=repr(pcfg.spacing), targets=targets)
    prepared = [prepare_proximity(d, pcfg, fw, patch.pad_value, targets) for d in data]
    if targets == "ostia":
        prepared = [p for p, d in zip(prepared, data) if len(d.ostia)]
    if not prepared:
        raise ValidationError("no training volumes with proximity targets")
    crops = max(cfg.batch_size // 4, 1)
    state = cnn.AdamState()
    losses = []
    for it in range(cfg.iterations):
        x, t = _proximity_batch(prepared, crops, fw, rng)
        out, cache = cnn.forward(params, x, train=True)
        loss, dout, parts = cnn.proximity_loss(params, out, t, cfg.lam_r, cfg.lam_w)
        lr = lr_at(cfg, it)
        _check_finite(loss, it, lr, parts, params)
        grads = cnn.backward(params, cache, dout)
        cnn.add_weight_decay_grad(params, grads, cfg.lam_w)
        cnn.adam_step(params, grads, state, lr)
        losses.append(loss)
        if progress is not None:
            progress(it, loss)
    return params, np.array(losses)


def proximity_config_of(params: cnn.NetworkParams) -> ProximityConfig:
    m = params.meta
    return ProximityConfig(float(m.get("a", 6.0)), float(m.get("d_max", 4.0)), float(m.get("spacing", 1.0)))
