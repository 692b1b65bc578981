"""Quaternion rotation algebra, uniform SO(3) sampling, and volume rotation.

Quaternion convention (fixed globally, asserted by the composition test):
Hamilton product, scalar-first components (w, x, y, z), active rotation of
column vectors in right-handed axes. q and -q encode the same rotation;
construction canonicalizes the sign so the first nonzero component is
positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import GeometryError, RotationSetError
from .volume import Volume, require_cubic_odd

# Irrational windings of the super-Fibonacci spiral on S^3.
_SF_PHI = np.sqrt(2.0)
_SF_PSI = 1.533751168755204288118041


def canonicalize(q: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        for v in q:
            if v != 0.0:
                return q if v > 0 else -q
        return q
    flat = q.reshape(-1, 4)
    idx = np.argmax(flat != 0.0, axis=1)
    signs = np.sign(flat[np.arange(flat.shape[0]), idx])
    signs[signs == 0.0] = 1.0
    return (flat * signs[:, None]).reshape(q.shape)


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion with canonical sign (qw >= 0, first nonzero positive)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        arr = np.array([self.w, self.x, self.y, self.z], dtype=np.float64)
        n = float(np.linalg.norm(arr))
        if abs(n - 1.0) > 1e-12:
            raise RotationSetError(f"quaternion norm {n!r} not unit within 1e-12")
        arr = canonicalize(arr)
        for name, v in zip("wxyz", arr):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_array(cls, arr: np.ndarray, normalize: bool = False) -> "UnitQuaternion":
        arr = np.asarray(arr, dtype=np.float64).reshape(4)
        if normalize:
            n = float(np.linalg.norm(arr))
            if n == 0.0:
                raise RotationSetError("cannot normalize the zero quaternion")
            arr = arr / n
        return cls(*arr)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float) -> "UnitQuaternion":
        ax = np.asarray(axis, dtype=np.float64)
        ax = ax / np.linalg.norm(ax)
        half = np.deg2rad(angle_deg) / 2.0
        return cls.from_array(np.concatenate(([np.cos(half)], np.sin(half) * ax)),
                              normalize=True)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)


def quat_multiply(q1: UnitQuaternion, q2: UnitQuaternion) -> UnitQuaternion:
    """Hamilton product q1 * q2 (apply q2 first, then q1)."""
    w1, v1 = q1.w, np.array([q1.x, q1.y, q1.z])
    w2, v2 = q2.w, np.array([q2.x, q2.y, q2.z])
    w = w1 * w2 - float(v1 @ v2)
    v = w1 * v2 + w2 * v1 + np.cross(v1, v2)
    return UnitQuaternion.from_array(np.concatenate(([w], v)), normalize=True)


def quat_to_matrix(q: UnitQuaternion | np.ndarray) -> np.ndarray:
    """3x3 proper rotation matrix for an active Hamilton quaternion."""
    if isinstance(q, UnitQuaternion):
        w, x, y, z = q.w, q.x, q.y, q.z
    else:
        w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ], dtype=np.float64)


def rot_distance_deg(q1: UnitQuaternion, q2: UnitQuaternion) -> float:
    """Angular distance 2*arccos(|q1 . q2|) in degrees, in [0, 180]."""
    d = abs(float(q1.as_array() @ q2.as_array()))
    return float(np.degrees(2.0 * np.arccos(min(d, 1.0))))


@dataclass(frozen=True)
class RotationSet:
    """Ordered set of unit quaternions with provenance."""

    quats: np.ndarray  # (N, 4), unit rows, canonical sign
    generator: str
    seed: int | None = None

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.quats, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise RotationSetError(f"rotation set must be (N, 4), got {arr.shape}")
        norms = np.linalg.norm(arr, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-12):
            raise RotationSetError("rotation set contains non-unit quaternions")
        arr.setflags(write=False)
        object.__setattr__(self, "quats", arr)

    def __len__(self) -> int:
        return self.quats.shape[0]

    def __getitem__(self, i: int) -> UnitQuaternion:
        return UnitQuaternion.from_array(self.quats[i], normalize=True)

    def subset(self, n: int) -> "RotationSet":
        return RotationSet(self.quats[:n], generator=f"{self.generator}[:{n}]", seed=self.seed)

    def second_moment(self) -> np.ndarray:
        return self.quats.T @ self.quats / len(self)


def sample_so3_uniform(n: int) -> RotationSet:
    """Deterministic low-discrepancy rotation sampling (super-Fibonacci spiral).

    Points interleave two irrational windings over nested tori of S^3,
    giving far better integration uniformity than i.i.d. sampling.
    """
    if n < 1:
        raise RotationSetError(f"rotation count must be >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    s = i + 0.5
    t = s / n
    d = 2.0 * np.pi * s
    r = np.sqrt(t)
    big_r = np.sqrt(1.0 - t)
    alpha = d / _SF_PHI
    beta = d / _SF_PSI
    q = np.stack([r * np.sin(alpha), r * np.cos(alpha),
                  big_r * np.sin(beta), big_r * np.cos(beta)], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return RotationSet(canonicalize(q), generator="super-fibonacci")


def sample_so3_random(n: int, seed: int) -> RotationSet:
    """Seeded i.i.d. uniform rotations (subgroup-algorithm construction).

    Independent of the low-discrepancy set; used for ground-truth poses and
    Monte-Carlo oracles so they cannot accidentally align with integration
    samples.
    """
    if n < 1:
        raise RotationSetError(f"rotation count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    u1, u2, u3 = rng.random(n), rng.random(n), rng.random(n)
    q = np.stack([
        np.sqrt(1.0 - u1) * np.sin(2.0 * np.pi * u2),
        np.sqrt(1.0 - u1) * np.cos(2.0 * np.pi * u2),
        np.sqrt(u1) * np.sin(2.0 * np.pi * u3),
        np.sqrt(u1) * np.cos(2.0 * np.pi * u3),
    ], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return RotationSet(canonicalize(q), generator="shoemake", seed=seed)


def _centered_grid(size: int) -> np.ndarray:
    """(3, size^3) voxel coordinates relative to the center voxel."""
    c = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - c
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()])


_GRID_CACHE: dict[int, np.ndarray] = {}


def rotate_volume(t: Volume, q: UnitQuaternion | np.ndarray) -> Volume:
    """Rotate a cubic odd-sized volume about its center voxel.

    Inverse-mapping with trilinear interpolation: each output voxel samples
    the input at R^-1 x; samples falling outside the input are 0.
    """
    size = require_cubic_odd(t, "rotated volume")
    grid = _GRID_CACHE.get(size)
    if grid is None:
        grid = _centered_grid(size)
        _GRID_CACHE[size] = grid
    rot = quat_to_matrix(q)
    c = (size - 1) / 2.0
    coords = rot.T @ grid + c
    out = map_coordinates(t.data, coords, order=1, mode="constant", cval=0.0,
                          prefilter=False)
    return t.with_data(out.reshape(t.dims))


def rotate_array(arr: np.ndarray, q: np.ndarray, grid: np.ndarray,
                 out: np.ndarray | None = None) -> np.ndarray:
    """rotate_volume core for hot loops: raw array in, raw flat array out."""
    rot = quat_to_matrix(q)
    c = (arr.shape[0] - 1) / 2.0
    coords = rot.T @ grid
    coords += c
    res = map_coordinates(arr, coords, order=1, mode="constant", cval=0.0,
                          prefilter=False)
    if out is not None:
        out[:] = res
        return out
    return res
