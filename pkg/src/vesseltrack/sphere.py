"""Direction codebook on the unit sphere and the normalized entropy."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True, eq=False)
class DirectionCodebook:
    dirs: np.ndarray

    def __post_init__(self):
        dirs = np.asarray(self.dirs, dtype=float)
        if dirs.ndim != 2 or dirs.shape[1] != 3 or len(dirs) < 4:
            raise ValidationError("codebook needs at least 4 three-vectors")
        if not np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValidationError("codebook vectors must have unit norm")
        dirs = dirs.copy()
        dirs.setflags(write=False)
        object.__setattr__(self, "dirs", dirs)

    @property
    def n(self) -> int:
        return len(self.dirs)

    def __len__(self) -> int:
        return len(self.dirs)

    def angles_to(self, d: int) -> np.ndarray:
        """Angle in degrees from codebook entry ``d`` to every entry."""
        return np.degrees(np.arccos(np.clip(self.dirs @ self.dirs[d], -1.0, 1.0)))


def fibonacci_codebook(n: int) -> DirectionCodebook:
    """Golden-angle spiral of ``n`` near-uniform unit vectors."""
    if n < 4:
        raise ValidationError(f"codebook size must be >= 4, got {n}")
    return _fibonacci(int(n))


@lru_cache(maxsize=16)
def _fibonacci(n: int) -> DirectionCodebook:
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(1.0 - z * z)
    phi = GOLDEN_ANGLE * i
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return DirectionCodebook(dirs)


def nearest_direction(cb: DirectionCodebook, v) -> int:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if not norm > 0:
        raise ValidationError("cannot classify a zero vector")
    # argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(cb.dirs @ (v / norm)))


def nearest_directions(cb: DirectionCodebook, vs) -> np.ndarray:
    """Vectorized :func:`nearest_direction` over the last axis."""
    vs = np.asarray(vs, dtype=float)
    norms = np.linalg.norm(vs, axis=-1, keepdims=True)
    if np.any(norms <= 0):
        raise ValidationError("cannot classify a zero vector")
    return np.argmax((vs / norms) @ cb.dirs.T, axis=-1)


def cone_indices(cb: DirectionCodebook, d: int, max_angle: float) -> np.ndarray:
    if not 0 < max_angle < 180:
        raise ValidationError(f"cone angle must lie in (0, 180), got {max_angle}")
    cos_limit = np.cos(np.radians(max_angle))
    inside = cb.dirs @ cb.dirs[d] >= cos_limit - 1e-12
    inside[d] = True
    return np.flatnonzero(inside)


def normalized_entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    h = -(nz * np.log2(nz)).sum() / np.log2(len(p))
    return float(min(max(h, 0.0), 1.0))


def normalized_entropies(p) -> np.ndarray:
    """Row-wise normalized entropy of a (n, |D|) array."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return np.clip(terms.sum(axis=-1) / np.log2(p.shape[-1]), 0.0, 1.0)
