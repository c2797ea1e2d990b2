"""Scalar 3D volumes, trilinear sampling and oriented patch extraction.

World coordinates are millimetres. A volume stores its intensities as an
array indexed ``data[i, j, k]`` along x, y, z; on disk the values are written
x-fastest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    HeaderError,
    LengthMismatchError,
    TruncatedPayloadError,
    ValidationError,
)

MAGIC = "VTV1"


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be 3D and non-empty, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be three finite values, got {self.origin}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume intensities must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        """World-space size between the first and last voxel centres."""
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array(self.origin)
        return lo, lo + self.extent_mm

    def contains(self, p, margin: float = 0.0) -> bool:
        lo, hi = self.bounds()
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo - margin) and np.all(p <= hi + margin))


@dataclass(frozen=True)
class PatchSpec:
    width: int = 19
    voxel_mm: float = 0.5
    pad_value: float = 0.0

    def __post_init__(self):
        if self.width < 3 or self.width % 2 == 0:
            raise ValidationError(f"patch width must be odd and >= 3, got {self.width}")
        if not self.voxel_mm > 0:
            raise ValidationError(f"patch voxel size must be positive, got {self.voxel_mm}")

    @property
    def half_extent_mm(self) -> float:
        return (self.width - 1) / 2 * self.voxel_mm

    def offsets(self) -> np.ndarray:
        """Cell-centred grid offsets in patch coordinates, shape (w, w, w, 3)."""
        ax = (np.arange(self.width) - (self.width - 1) / 2) * self.voxel_mm
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


@dataclass
class Patch:
    values: np.ndarray
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    @property
    def width(self) -> int:
        return self.values.shape[0]


def world_to_voxel(vol: Volume, p) -> np.ndarray:
    return (np.asarray(p, dtype=float) - np.array(vol.origin)) / np.array(vol.spacing)


def voxel_to_world(vol: Volume, ijk) -> np.ndarray:
    return np.asarray(ijk, dtype=float) * np.array(vol.spacing) + np.array(vol.origin)


def _padded(vol: Volume, pad: float) -> np.ndarray:
    """One-voxel padded copy of the data, cached on the (immutable) volume."""
    key = float(pad)
    cache = vol.__dict__.setdefault("_pad_cache", {})
    if key not in cache:
        cache.clear()
        cache[key] = np.pad(vol.data, 1, mode="constant", constant_values=np.float32(pad))
    return cache[key]


def sample_points(vol: Volume, points, pad: float = 0.0) -> np.ndarray:
    """Trilinear interpolation at many world points.

    ``points`` has shape (..., 3); the result has shape (...). Any of the
    eight corners lying outside the volume contributes ``pad``.
    """
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    u = world_to_voxel(vol, points.reshape(-1, 3))
    padded = _padded(vol, pad)
    base = np.floor(u)
    frac = u - base
    dims = np.array(vol.dims)
    # index -1 and n land on the pad border after the +1 shift
    i0 = np.clip(base.astype(np.int64), -1, dims) + 1
    i1 = np.clip(base.astype(np.int64) + 1, -1, dims) + 1
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    out = np.zeros(len(u))
    for cx, wx in ((i0[:, 0], 1 - fx), (i1[:, 0], fx)):
        for cy, wy in ((i0[:, 1], 1 - fy), (i1[:, 1], fy)):
            for cz, wz in ((i0[:, 2], 1 - fz), (i1[:, 2], fz)):
                out += wx * wy * wz * padded[cx, cy, cz]
    return out.reshape(shape)


def sample_trilinear(vol: Volume, p, pad: float = 0.0) -> float:
    return float(sample_points(vol, np.asarray(p, dtype=float)[None], pad)[0])


def check_rotation(rotation, tol: float = 1e-6) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=float)
    if rotation.shape != (3, 3) or not np.allclose(rotation.T @ rotation, np.eye(3), atol=tol, rtol=0):
        raise ValidationError("patch rotation must be an orthonormal 3x3 matrix")
    return rotation


def patch_points(center, spec: PatchSpec, rotation=None) -> np.ndarray:
    """World positions of every patch sample, shape (w, w, w, 3)."""
    offsets = spec.offsets()
    if rotation is not None:
        offsets = offsets @ check_rotation(rotation).T
    return offsets + np.asarray(center, dtype=float)


def extract_patch(vol: Volume, center, spec: PatchSpec, rotation=None) -> Patch:
    rotation = np.eye(3) if rotation is None else check_rotation(rotation)
    center = np.asarray(center, dtype=float)
    values = sample_points(vol, patch_points(center, spec, rotation), spec.pad_value)
    return Patch(values=values.astype(np.float32), center=center, rotation=rotation)


def extract_patches(vol: Volume, centers, spec: PatchSpec, rotations=None) -> np.ndarray:
    """Batch form of :func:`extract_patch`; returns values of shape (n, w, w, w)."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    offsets = spec.offsets()
    if rotations is None:
        pts = offsets[None] + centers[:, None, None, None, :]
    else:
        rotations = np.asarray(rotations, dtype=float).reshape(-1, 3, 3)
        pts = np.einsum("xyzj,nij->nxyzi", offsets, rotations) + centers[:, None, None, None, :]
    return sample_points(vol, pts, spec.pad_value).astype(np.float32)


def resample_isotropic(vol: Volume, spacing_mm: float, pad: float = 0.0) -> Volume:
    """Resample onto an isotropic grid covering the same world extent."""
    n = np.floor(vol.extent_mm / spacing_mm + 1e-9).astype(int) + 1
    axes = [np.arange(k) * spacing_mm + o for k, o in zip(n, vol.origin)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return Volume(sample_points(vol, grid, pad).astype(np.float32), (spacing_mm,) * 3, vol.origin)


def write_volume(vol: Volume, path) -> None:
    header = (
        f"{MAGIC}\n"
        f"dims {vol.dims[0]} {vol.dims[1]} {vol.dims[2]}\n"
        f"spacing {vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}\n"
        f"origin {vol.origin[0]!r} {vol.origin[1]!r} {vol.origin[2]!r}\n"
        "data raw-f32-le\n\n"
    )
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _parse_triple(line: str, key: str, cast):
    parts = line.split()
    if len(parts) != 4 or parts[0] != key:
        raise HeaderError(f"expected '{key} a b c', got {line!r}")
    try:
        return tuple(cast(v) for v in parts[1:])
    except ValueError as exc:
        raise HeaderError(f"bad values in {line!r}") from exc


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise HeaderError(f"{os.fspath(path)}: header terminator not found")
    try:
        lines = blob[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise HeaderError("header is not ASCII text") from exc
    if len(lines) != 5 or lines[0] != MAGIC:
        raise HeaderError(f"not a {MAGIC} header")
    dims = _parse_triple(lines[1], "dims", int)
    spacing = _parse_triple(lines[2], "spacing", float)
    origin = _parse_triple(lines[3], "origin", float)
    if lines[4].strip() != "data raw-f32-le":
        raise HeaderError(f"unsupported data line {lines[4]!r}")
    if min(dims) < 1:
        raise ValidationError(f"dims must be positive, got {dims}")
    if not all(s > 0 for s in spacing):
        raise ValidationError(f"spacing must be positive, got {spacing}")
    payload = blob[sep + 2:]
    expected = int(np.prod(dims)) * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) != expected:
        raise LengthMismatchError(f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    return Volume(data.astype(np.float32), spacing, origin)
