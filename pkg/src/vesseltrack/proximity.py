"""Proximity regression targets and dense proximity-map prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import cnn
from .centerline import dense_samples
from .errors import ShapeMismatchError, ValidationError
from .volume import Volume, resample_isotropic


@dataclass(frozen=True)
class ProximityConfig:
    a: float = 6.0
    d_max: float = 4.0
    spacing: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.d_max > 0 and self.spacing > 0):
            raise ValidationError("proximity parameters must be positive")

    @property
    def peak(self) -> float:
        return float(np.expm1(self.a))


SEED_PROXIMITY = ProximityConfig(d_max=4.0)
OSTIA_PROXIMITY = ProximityConfig(d_max=16.0)


def proximity_target(dist, cfg: ProximityConfig = SEED_PROXIMITY):
    """exp(a (1 - dist / d_max)) - 1 inside the cutoff, 0 beyond it."""
    dist = np.asarray(dist, dtype=float)
    if np.any(dist < 0):
        raise ValidationError("distance must be non-negative")
    val = np.where(dist < cfg.d_max, np.expm1(cfg.a * (1.0 - dist / cfg.d_max)), 0.0)
    return float(val) if val.ndim == 0 else val


def grid_points(vol: Volume) -> np.ndarray:
    axes = [o + np.arange(n) * s for n, s, o in zip(vol.dims, vol.spacing, vol.origin)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def distance_map(vol: Volume, refs=None, points=None) -> np.ndarray:
    """Distance (mm) from every voxel centre to the nearest centerline or point."""
    if refs is not None:
        targets = dense_samples(refs, 0.1)[0]
    else:
        targets = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(targets) == 0:
        return np.full(vol.dims, np.inf)
    dist, _ = cKDTree(targets).query(grid_points(vol).reshape(-1, 3))
    return dist.reshape(vol.dims)


def target_map(vol: Volume, cfg: ProximityConfig, refs=None, points=None) -> np.ndarray:
    return proximity_target(distance_map(vol, refs, points), cfg)


def pad_for_network(data: np.ndarray, field_width: int, pad_value: float) -> np.ndarray:
    half = (field_width - 1) // 2
    return np.pad(data, half, mode="constant", constant_values=np.float32(pad_value))


def predict_proximity_map(vol: Volume, params: cnn.NetworkParams, cfg: ProximityConfig | None = None,
                          tile: int = 48) -> Volume:
    """Resample to the inference spacing and evaluate the network densely.

    The resampled grid is padded by half the receptive field so the output is
    aligned voxel for voxel with it. Work is split into tiles along x to bound
    memory; tiles overlap only in their input margins so the result does not
    depend on ``tile``.
    """
    if params.spec.head != "proximity":
        raise ShapeMismatchError("proximity map needs a proximity-head network")
    cfg = cfg or ProximityConfig(spacing=params.patch.voxel_mm)
    iso = resample_isotropic(vol, cfg.spacing, params.patch.pad_value)
    fw = params.spec.field_width
    if min(iso.dims) < fw:
        raise ShapeMismatchError(f"resampled volume {iso.dims} smaller than the receptive field {fw}")
    padded = pad_for_network(iso.data, fw, params.patch.pad_value)
    nx = iso.dims[0]
    out = np.empty(iso.dims, dtype=np.float64)
    for x0 in range(0, nx, tile):
        x1 = min(x0 + tile, nx)
        block = padded[x0:x1 + fw - 1]
        out[x0:x1] = cnn.proximity_values(params, cnn.infer(params, block[None, ..., None]))[0]
    return Volume(out.astype(np.float32), iso.spacing, iso.origin)
