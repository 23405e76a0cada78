"""Grid types and dense 3D kernels.

Arrays are indexed ``[ix, iy, iz]`` (x first); on disk the same data is laid
out x-fastest, which is numpy Fortran order. World coordinates are
``origin + index * spacing`` in millimetres with an identity direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import CoverageError, ParameterError, ShapeError

Triple = tuple[float, float, float]

_AXES = "xyz"


def _triple(value, name: str) -> Triple:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite, got {value!r}")
    return (float(arr[0]), float(arr[1]), float(arr[2]))


class _Grid:
    """Shared geometry helpers for :class:`Volume` and :class:`DisplacementField`."""

    data: np.ndarray
    spacing: Triple
    origin: Triple

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def same_grid(self, other: "_Grid", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def require_same_grid(self, other: "_Grid", what: str = "inputs") -> None:
        if not self.same_grid(other):
            raise ShapeError(
                f"{what} are on different grids: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing} vs {other.spacing}, "
                f"origin {self.origin} vs {other.origin}"
            )

    def axis_coordinates(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return self.origin[axis] + np.arange(n, dtype=np.float64) * self.spacing[axis]

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel, shape ``(nx, ny, nz, 3)``."""
        axes = [self.axis_coordinates(a) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_index(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_world(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        idx = self.to_index(points)
        upper = np.asarray(self.dims, dtype=np.float64) - 1
        return np.all((idx >= -tol) & (idx <= upper + tol), axis=-1)


def _freeze(data, ndim: int, name: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} data must have {ndim} dimensions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} data contains NaN or Inf")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume(_Grid):
    """Scalar image on a regular grid (intensity, Jacobian map or mask)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _freeze(self.data, 3, "Volume"))
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ParameterError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True, eq=False)
class DisplacementField(_Grid):
    """Per-voxel displacement in millimetres, data shape ``(nx, ny, nz, 3)``."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = _freeze(self.data, 4, "DisplacementField")
        if arr.shape[3] != 3:
            raise ShapeError(f"DisplacementField needs 3 components, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise ParameterError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "DisplacementField":
        return cls(np.zeros(tuple(dims) + (3,)), spacing, origin)

    @classmethod
    def like(cls, grid: _Grid, data) -> "DisplacementField":
        return cls(data, grid.spacing, grid.origin)

    def with_data(self, data) -> "DisplacementField":
        return DisplacementField(data, self.spacing, self.origin)

    def component(self, axis: int) -> Volume:
        return Volume(self.data[..., axis], self.spacing, self.origin)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.data**2, axis=-1))


Gridded = Union[Volume, DisplacementField]


# ---------------------------------------------------------------------------
# Interpolation


def _lerp(a, b, t):
    return a * (1.0 - t) + b * t


def trilinear_at_index(data: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at continuous voxel indices with edge clamping.

    ``data`` is ``(nx, ny, nz)`` or ``(nx, ny, nz, C)``; ``index`` is
    ``(..., 3)``. Returns ``(...)`` or ``(..., C)``.
    """
    index = np.asarray(index, dtype=np.float64)
    if not np.all(np.isfinite(index)):
        raise ParameterError("sample points must be finite")
    lo, t = [], []
    for a in range(3):
        n = data.shape[a]
        u = np.clip(index[..., a], 0.0, n - 1)
        i0 = np.clip(np.floor(u).astype(np.intp), 0, max(n - 2, 0))
        lo.append(i0)
        t.append(u - i0)
    hi = [np.minimum(i0 + 1, data.shape[a] - 1) for a, i0 in enumerate(lo)]
    extra = (slice(None),) * (data.ndim - 3)
    tx, ty, tz = t
    if data.ndim == 4:
        tx, ty, tz = tx[..., None], ty[..., None], tz[..., None]

    def corner(ix, iy, iz):
        return data[(ix, iy, iz) + extra]

    c00 = _lerp(corner(lo[0], lo[1], lo[2]), corner(hi[0], lo[1], lo[2]), tx)
    c10 = _lerp(corner(lo[0], hi[1], lo[2]), corner(hi[0], hi[1], lo[2]), tx)
    c01 = _lerp(corner(lo[0], lo[1], hi[2]), corner(hi[0], lo[1], hi[2]), tx)
    c11 = _lerp(corner(lo[0], hi[1], hi[2]), corner(hi[0], hi[1], hi[2]), tx)
    return _lerp(_lerp(c00, c10, ty), _lerp(c01, c11, ty), tz)


def trilinear_sample(v: Gridded, p):
    """Sample ``v`` at world point(s) ``p`` (mm), clamping to the boundary layer.

    A single point returns a float (or a length-3 array for a field); an
    array of points ``(..., 3)`` returns the matching array of samples.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (3,):
        raise ShapeError(f"points must have a trailing axis of length 3, got {p.shape}")
    out = trilinear_at_index(v.data, v.to_index(p))
    if p.ndim == 1 and isinstance(v, Volume):
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Filtering


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Normalised 1D Gaussian taps at offsets ``-r..r`` with ``r = ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return w / w.sum()


def gaussian_smooth(v: Gridded, sigma) -> Gridded:
    """Separable Gaussian smoothing; ``sigma`` in mm, scalar or per axis.

    Edges are replicated. A zero sigma on an axis leaves that axis untouched,
    so ``sigma=0`` returns the input data bit for bit.
    """
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sig < 0) or not np.all(np.isfinite(sig)):
        raise ParameterError(f"sigma must be finite and >= 0, got {sigma!r}")
    out = np.array(v.data)
    for axis in range(3):
        s_vox = sig[axis] / v.spacing[axis]
        if s_vox == 0:
            continue
        out = ndimage.correlate1d(out, gaussian_kernel(s_vox), axis=axis, mode="nearest")
    return v.with_data(out)


# ---------------------------------------------------------------------------
# B-spline control grids


def cubic_bspline_weights(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for control points ``i-1 .. i+2``.

    ``t`` is the fractional offset in ``[0, 1)``; returns shape ``t.shape + (4,)``.
    """
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            (1.0 - t) ** 3 / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ],
        axis=-1,
    )


@dataclass(frozen=True, eq=False)
class ControlGrid:
    """Cubic B-spline control points: ``values`` has shape ``(cx, cy, cz, 3)``.

    ``origin`` is the world position of control point ``(0, 0, 0)``;
    ``padding`` counts control points placed before the image origin.
    """

    values: np.ndarray
    grid_spacing: Triple
    origin: Triple
    padding: int = 2

    def __post_init__(self):
        values = _freeze(self.values, 4, "ControlGrid")
        if values.shape[3] != 3:
            raise ShapeError(f"control values need 3 components, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        s = _triple(self.grid_spacing, "grid_spacing")
        if min(s) <= 0:
            raise ParameterError(f"grid spacing must be > 0, got {s}")
        object.__setattr__(self, "grid_spacing", s)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @staticmethod
    def layout(dims, spacing, origin, grid_spacing, padding: int = 2):
        """Control-point counts and origin covering an image grid."""
        if padding < 2:
            raise ParameterError(f"padding must be >= 2 control points, got {padding}")
        spacing = np.asarray(_triple(spacing, "spacing"))
        origin = np.asarray(_triple(origin, "origin"))
        s = np.asarray(_triple(grid_spacing, "grid_spacing"))
        extent = (np.asarray(dims, dtype=np.float64) - 1) * spacing
        counts = tuple(int(c) for c in np.ceil(extent / s - 1e-9).astype(int) + 1 + 2 * padding)
        return counts, tuple(origin - padding * s)

    @classmethod
    def covering(cls, dims, spacing, origin, grid_spacing, padding: int = 2, values=None) -> "ControlGrid":
        counts, g_origin = cls.layout(dims, spacing, origin, grid_spacing, padding)
        if values is None:
            values = np.zeros(counts + (3,))
        elif tuple(np.shape(values)) != counts + (3,):
            raise ShapeError(f"control values must have shape {counts + (3,)}, got {np.shape(values)}")
        return cls(values, grid_spacing, g_origin, padding)

    def as_field(self) -> DisplacementField:
        """The control values viewed as a coarse field (for smoothing)."""
        return DisplacementField(self.values, self.grid_spacing, self.origin)


def _bspline_matrix(positions: np.ndarray, g_origin: float, s: float, n_ctrl: int, axis: int) -> np.ndarray:
    u = (positions - g_origin) / s
    i = np.floor(u).astype(np.intp)
    if i.min() - 1 < 0 or i.max() + 2 > n_ctrl - 1:
        raise CoverageError(
            f"control grid does not cover the target along axis {_AXES[axis]}: "
            f"needs control indices {i.min() - 1}..{i.max() + 2}, grid has 0..{n_ctrl - 1}"
        )
    w = cubic_bspline_weights(u - i)
    mat = np.zeros((positions.size, n_ctrl))
    rows = np.arange(positions.size)
    for k in range(4):
        mat[rows, i - 1 + k] = w[:, k]
    return mat


def resample_control_grid(g: ControlGrid, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> DisplacementField:
    """Evaluate the cubic B-spline tensor product on a dense voxel grid."""
    dims = tuple(int(n) for n in dims)
    spacing = _triple(spacing, "spacing")
    origin = _triple(origin, "origin")
    mats = []
    for a in range(3):
        pos = origin[a] + np.arange(dims[a], dtype=np.float64) * spacing[a]
        mats.append(_bspline_matrix(pos, g.origin[a], g.grid_spacing[a], g.shape[a], a))
    out = np.einsum("ia,abcd->ibcd", mats[0], g.values)
    out = np.einsum("jb,ibcd->ijcd", mats[1], out)
    out = np.einsum("kc,ijcd->ijkd", mats[2], out)
    return DisplacementField(out, spacing, origin)


# ---------------------------------------------------------------------------
# Resolution changes


def downscale(v: Gridded, factor: int) -> Gridded:
    """Anti-aliased decimation: smooth with sigma = factor/2 voxels, keep every factor-th sample."""
    if not isinstance(factor, (int, np.integer)) or factor < 2:
        raise ParameterError(f"downscale factor must be an integer >= 2, got {factor!r}")
    if factor not in (2, 4):
        raise ParameterError(f"downscale factor must be 2 or 4, got {factor}")
    sigma_mm = [factor / 2.0 * h for h in v.spacing]
    smoothed = gaussian_smooth(v, sigma_mm)
    data = smoothed.data[::factor, ::factor, ::factor]
    spacing = tuple(h * factor for h in v.spacing)
    return type(v)(data, spacing, v.origin)


def _linear_along_axis(data: np.ndarray, axis: int, index: np.ndarray) -> np.ndarray:
    n = data.shape[axis]
    u = np.clip(index, 0.0, n - 1)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    t = u - i0
    shape = [1] * data.ndim
    shape[axis] = t.size
    t = t.reshape(shape)
    return _lerp(np.take(data, i0, axis=axis), np.take(data, i1, axis=axis), t)


def upscale_field(f: DisplacementField, dims, spacing, origin=None) -> DisplacementField:
    """Trilinearly resample a field onto a finer grid; values (mm) are unchanged."""
    spacing = _triple(spacing, "spacing")
    origin = f.origin if origin is None else _triple(origin, "origin")
    for a in range(3):
        ratio = f.spacing[a] / spacing[a]
        if abs(ratio - round(ratio)) > 1e-9 or int(round(ratio)) not in (1, 2, 4):
            raise ParameterError(
                f"target spacing {spacing[a]} must divide source spacing {f.spacing[a]} "
                f"by 1, 2 or 4 along axis {_AXES[a]}"
            )
    out = f.data
    for a in range(3):
        pos = origin[a] + np.arange(int(dims[a]), dtype=np.float64) * spacing[a]
        out = _linear_along_axis(out, a, (pos - f.origin[a]) / f.spacing[a])
    return DisplacementField(out, spacing, origin)


# ---------------------------------------------------------------------------
# Finite differences


def diff_along(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Central differences inside, one-sided at the two faces, divided by ``h``."""
    n = arr.shape[axis]
    if n < 3:
        raise ParameterError(f"need at least 3 samples along axis {_AXES[axis]}, got {n}")
    a = np.moveaxis(arr, axis, 0)
    out = np.empty_like(a, dtype=np.float64)
    out[1:-1] = (a[2:] - a[:-2]) / (2.0 * h)
    out[0] = (a[1] - a[0]) / h
    out[-1] = (a[-1] - a[-2]) / h
    return np.moveaxis(out, 0, axis)


def diff_along_adjoint(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Transpose of :func:`diff_along` (used for analytic loss gradients)."""
    n = arr.shape[axis]
    if n < 3:
        raise ParameterError(f"need at least 3 samples along axis {_AXES[axis]}, got {n}")
    y = np.moveaxis(arr, axis, 0)
    g = np.zeros_like(y, dtype=np.float64)
    half = y[1:-1] / (2.0 * h)
    g[2:] += half
    g[:-2] -= half
    g[1] += y[0] / h
    g[0] -= y[0] / h
    g[-1] += y[-1] / h
    g[-2] -= y[-1] / h
    return np.moveaxis(g, 0, axis)


def central_gradient(v: Volume, axis: int) -> Volume:
    """Derivative of ``v`` along ``axis`` in value per mm."""
    if axis not in (0, 1, 2):
        raise ParameterError(f"axis must be 0, 1 or 2, got {axis!r}")
    return v.with_data(diff_along(v.data, axis, v.spacing[axis]))


__all__ = [
    "ControlGrid",
    "DisplacementField",
    "Volume",
    "central_gradient",
    "cubic_bspline_weights",
    "diff_along",
    "diff_along_adjoint",
    "downscale",
    "gaussian_kernel",
    "gaussian_smooth",
    "resample_control_grid",
    "trilinear_at_index",
    "trilinear_sample",
    "upscale_field",
]
