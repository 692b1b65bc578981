"""Dense 3D volumes and the normalization/correlation primitives.

Conventions used throughout the package:

* ``Volume.data`` is indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``.
  In-memory arrays are float64; 32-bit precision applies to on-disk
  formats only (see :mod:`ttmkit.io`).
* Correlation maps are indexed by the image coordinate of the template
  *center*: ``cross_correlate_fft(f, g)[x]`` sums ``f`` over a g-sized
  window centered at ``x``.
* FFT correlation is circular. Values within one template radius of the
  volume border wrap around and are unreliable; the block pipeline
  excludes them via halos/margins rather than padding each correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy.ndimage import correlate1d

from .errors import DegenerateTemplateError, GeometryError, ShapeError

# 3-tap smoothing kernel [a, 1-2a, a]; a = 1/5 gives near-isotropic response
# while keeping the filter positive semidefinite.
SMOOTH_A = 0.2
SMOOTH_KERNEL = np.array([SMOOTH_A, 1.0 - 2.0 * SMOOTH_A, SMOOTH_A], dtype=np.float64)

# Local-variance floor relative to (max|f|)^2; below it w(x) is forced to 0
# because flat regions cannot contain matches.
FLAT_EPS = 1e-8


@dataclass(frozen=True)
class Volume:
    """Immutable dense 3D scalar field with voxel-size metadata."""

    data: np.ndarray
    voxel_size: float = 1.0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"volume must be 3D, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"volume dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ShapeError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        """New volume with the same metadata and different samples."""
        return Volume(data, voxel_size=self.voxel_size, origin=self.origin)

    def is_cubic_odd(self) -> bool:
        nx, ny, nz = self.dims
        return nx == ny == nz and nx % 2 == 1


def require_cubic_odd(v: Volume, what: str = "template") -> int:
    """Return the cubic size, or raise GeometryError."""
    nx, ny, nz = v.dims
    if not (nx == ny == nz):
        raise GeometryError(f"{what} must be cubic, got dims {v.dims}")
    if nx % 2 == 0:
        raise GeometryError(f"{what} size must be odd for an unambiguous center, got {nx}")
    return nx


@dataclass(frozen=True)
class SoftMask:
    """Spherical weighting window: 1 inside r_in, 0 outside r_out, linear between."""

    volume: Volume
    r_in: float
    r_out: float
    mask_sum: float = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mask_sum", float(np.sum(self.volume.data, dtype=np.float64)))

    @property
    def size(self) -> int:
        return self.volume.dims[0]


def radial_distances(size: int) -> np.ndarray:
    """Euclidean distance of each voxel from the center of a cubic grid."""
    c = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - c
    return np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2)


def make_soft_mask(size: int, r_in: float | None = None, r_out: float | None = None,
                   voxel_size: float = 1.0) -> SoftMask:
    """Build the soft spherical mask on an odd cubic grid.

    Defaults when radii are omitted: r_out = (size-1)/2 and r_in = r_out - 2.
    The in-between profile is linear in radial distance.
    """
    if size % 2 == 0:
        raise GeometryError(f"mask size must be odd, got {size}")
    half = (size - 1) / 2.0
    if r_out is None:
        r_out = half
    if r_in is None:
        r_in = r_out - 2.0
    if not (0.0 < r_in < r_out):
        raise GeometryError(f"need 0 < r_in < r_out, got r_in={r_in}, r_out={r_out}")
    if r_out > half:
        raise GeometryError(f"r_out={r_out} exceeds half-size {half} for size {size}")
    r = radial_distances(size)
    vals = np.clip((r_out - r) / (r_out - r_in), 0.0, 1.0)
    return SoftMask(Volume(vals, voxel_size=voxel_size), r_in=float(r_in), r_out=float(r_out))


def mask_from_volume(v: Volume) -> SoftMask:
    """Wrap an existing mask volume, deriving its radii from the radial profile.

    Validates the SoftMask shape: values in [0, 1], 1-plateau around the
    center, 0 outside a support radius, non-increasing with radius.
    """
    size = require_cubic_odd(v, "mask")
    vals = v.data
    if vals.min() < -1e-9 or vals.max() > 1.0 + 1e-9:
        raise GeometryError("mask values must lie in [0, 1]")
    r = radial_distances(size)
    order = np.argsort(r, axis=None)
    prof = vals.flat[order]
    if np.any(np.diff(prof) > 1e-6):
        raise GeometryError("mask is not radially non-increasing")
    inner = r.flat[order][prof >= 1.0 - 1e-6]
    outer = r.flat[order][prof > 1e-6]
    if inner.size == 0 or outer.size == 0:
        raise GeometryError("mask has no interior plateau")
    return SoftMask(v, r_in=float(inner.max()), r_out=float(min(outer.max() + 1.0, (size - 1) / 2.0)))


def smooth(f: Volume) -> Volume:
    """Apply the separable 3-tap low-pass filter along each axis.

    Boundary samples are edge-replicated, which preserves unit DC gain at
    the borders. Mask application is a separate step (smooth_and_mask).
    """
    out = f.data
    for axis in range(3):
        out = correlate1d(out, SMOOTH_KERNEL, axis=axis, mode="nearest")
    return f.with_data(out)


def smooth_and_mask(f: Volume, m: SoftMask) -> Volume:
    """Element-wise product of the mask with the smoothed volume."""
    if f.dims != m.volume.dims:
        raise ShapeError(f"volume dims {f.dims} != mask dims {m.volume.dims}")
    return f.with_data(m.volume.data * smooth(f).data)


def normalize_template(t: Volume, m: SoftMask) -> Volume:
    """Zero-normalize a template under the soft mask.

    Subtracts the mask-weighted mean of the smoothed+masked template and
    scales by the square root of its residual energy, then re-applies the
    mask so the result has zero total sum and unit variance-like scale.
    """
    require_cubic_odd(t, "template")
    if t.dims != m.volume.dims:
        raise ShapeError(f"template dims {t.dims} != mask dims {m.volume.dims}")
    mt = m.volume.data
    st = smooth_and_mask(t, m).data
    big_m = m.mask_sum
    mu = float(np.sum(st * mt, dtype=np.float64)) / big_m
    energy = float(np.sum(st * st, dtype=np.float64))
    total = float(np.sum(st, dtype=np.float64))
    var = energy - total * total / big_m
    scale_floor = FLAT_EPS * max(float(np.max(np.abs(t.data))), 1e-300) ** 2
    if var <= scale_floor:
        raise DegenerateTemplateError("template is flat under the mask (zero variance)")
    return t.with_data(mt * (st - mu) / np.sqrt(var))


def _embed_centered(g: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """Zero-pad g to dims with its center voxel rolled to the origin."""
    out = np.zeros(dims, dtype=np.float64)
    sx, sy, sz = g.shape
    out[:sx, :sy, :sz] = g
    center = tuple(-((s - 1) // 2) for s in g.shape)
    return np.roll(out, center, axis=(0, 1, 2))


def cross_correlate_fft(f: Volume | np.ndarray, g: Volume | np.ndarray,
                        workers: int = 1) -> Volume | np.ndarray:
    """Circular cross-correlation of image f against kernel g via FFT.

    The output at voxel x is the sum of f over a g-sized window centered
    at x, weighted by g. g is zero-padded to f's dims and centered, so a
    copy of g embedded at position p in f produces its maximum at x = p.
    """
    f_arr = f.data if isinstance(f, Volume) else np.asarray(f, dtype=np.float64)
    g_arr = g.data if isinstance(g, Volume) else np.asarray(g, dtype=np.float64)
    if any(gs > fs for gs, fs in zip(g_arr.shape, f_arr.shape)):
        raise ShapeError(f"kernel dims {g_arr.shape} exceed image dims {f_arr.shape}")
    gf = sp_fft.rfftn(_embed_centered(g_arr, f_arr.shape), workers=workers)
    ff = sp_fft.rfftn(f_arr, workers=workers)
    out = sp_fft.irfftn(ff * np.conj(gf), s=f_arr.shape, workers=workers)
    if isinstance(f, Volume):
        return f.with_data(out)
    return out


def local_norm_field(f: Volume, m: SoftMask, workers: int = 1) -> Volume:
    """Per-voxel reciprocal of the local mask-weighted standard deviation.

    Two FFT correlations against the mask give the windowed sums of the
    smoothed image and of its square at every voxel; where the resulting
    variance falls at or below the flat-region floor the value is 0.
    """
    if any(ms > fs for ms, fs in zip(m.volume.dims, f.dims)):
        raise ShapeError(f"mask dims {m.volume.dims} exceed image dims {f.dims}")
    fs = smooth(f).data
    mask = m.volume.data
    b = cross_correlate_fft(fs, mask, workers=workers)
    a = cross_correlate_fft(fs * fs, mask, workers=workers)
    radicand = a - b * b / m.mask_sum
    eps = FLAT_EPS * float(np.max(np.abs(f.data))) ** 2
    w = np.zeros_like(radicand)
    ok = radicand > eps
    w[ok] = 1.0 / np.sqrt(radicand[ok])
    return f.with_data(w)
