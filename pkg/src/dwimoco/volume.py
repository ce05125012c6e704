"""3D/4D containers and spatial primitives: sampling, warping, gradients.

All coordinates and displacements are in voxel units; voxel spacing is
carried as metadata only.  Arrays are stored x-fastest when flattened, i.e.
flat index = x + nx*(y + ny*z), which corresponds to Fortran-order raveling
of an (nx, ny, nz) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class DimensionMismatchError(ValueError):
    """Operands live on different voxel grids."""


class DegenerateSeriesError(ValueError):
    """Series cannot be normalized (non-positive maximum at b=0)."""


def _as_volume_array(data) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-d array, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all dims must be >= 1, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """One 3D image; data[x, y, z], float64, read-only after construction."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "data", _as_volume_array(self.data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.spacing) != 3:
            raise ValueError("spacing must have 3 entries")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @classmethod
    def from_flat(cls, dims, flat, spacing=(1.0, 1.0, 1.0)) -> "ScalarVolume":
        """Build from an x-fastest flat array."""
        nx, ny, nz = dims
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != nx * ny * nz:
            raise ValueError(f"flat length {flat.size} != {nx * ny * nz}")
        return cls(flat.reshape((nx, ny, nz), order="F"), spacing)

    def to_flat(self) -> np.ndarray:
        """x-fastest flat copy of the data."""
        return self.data.ravel(order="F")


@dataclass(frozen=True, eq=False)
class BValueSeries:
    """Per-b-value image stack: bvalues[0] == 0, strictly ascending."""

    bvalues: tuple
    volumes: tuple

    def __post_init__(self):
        bvals = tuple(float(b) for b in self.bvalues)
        vols = tuple(self.volumes)
        object.__setattr__(self, "bvalues", bvals)
        object.__setattr__(self, "volumes", vols)
        if len(bvals) < 2:
            raise ValueError("need at least 2 b-values")
        if len(bvals) != len(vols):
            raise ValueError("bvalues and volumes length mismatch")
        if bvals[0] != 0.0:
            raise ValueError("first b-value must be 0")
        if any(b1 >= b2 for b1, b2 in zip(bvals, bvals[1:])):
            raise ValueError("b-values must be strictly increasing")
        dims = vols[0].dims
        for v in vols:
            if v.dims != dims:
                raise DimensionMismatchError("all volumes must share dims")
            if float(v.data.min()) < 0.0:
                raise ValueError("signal values must be >= 0")

    @property
    def dims(self) -> tuple:
        return self.volumes[0].dims

    @property
    def b_count(self) -> int:
        return len(self.bvalues)

    def stack(self) -> np.ndarray:
        """(B, nx, ny, nz) copy of all volumes."""
        return np.stack([v.data for v in self.volumes])


@dataclass(frozen=True, eq=False)
class RoiMask:
    """Binary region-of-interest mask on the same grid as the series."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data).astype(bool))
        if arr.ndim != 3:
            raise ValueError(f"expected a 3-d mask, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense per-voxel displacement u(p) in voxel units; data[x, y, z, 0:3]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected shape (nx, ny, nz, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("displacement components must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple:
        return self.data.shape[:3]

    @classmethod
    def zero(cls, dims) -> "DisplacementField":
        return cls(np.zeros(tuple(dims) + (3,), dtype=np.float64))

    def max_magnitude(self) -> float:
        return float(np.sqrt((self.data**2).sum(axis=-1)).max())


def trilinear_sample(vol: ScalarVolume, point) -> float:
    """Trilinear interpolation at a voxel-space point, clamp-to-edge.

    Total on finite points: out-of-bounds coordinates are clamped to the
    border, so the result is always a convex combination of the 8
    surrounding voxel values.
    """
    x, y, z = (float(c) for c in point)
    if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
        raise ValueError("point components must be finite")
    data = vol.data
    nx, ny, nz = data.shape
    x = min(max(x, 0.0), nx - 1.0)
    y = min(max(y, 0.0), ny - 1.0)
    z = min(max(z, 0.0), nz - 1.0)
    x0 = min(int(x), max(nx - 2, 0))
    y0 = min(int(y), max(ny - 2, 0))
    z0 = min(int(z), max(nz - 2, 0))
    x1 = min(x0 + 1, nx - 1)
    y1 = min(y0 + 1, ny - 1)
    z1 = min(z0 + 1, nz - 1)
    fx, fy, fz = x - x0, y - y0, z - z0
    c00 = data[x0, y0, z0] * (1 - fx) + data[x1, y0, z0] * fx
    c10 = data[x0, y1, z0] * (1 - fx) + data[x1, y1, z0] * fx
    c01 = data[x0, y0, z1] * (1 - fx) + data[x1, y0, z1] * fx
    c11 = data[x0, y1, z1] * (1 - fx) + data[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return float(c0 * (1 - fz) + c1 * fz)


def warp(vol: ScalarVolume, disp: DisplacementField) -> ScalarVolume:
    """Backward warp: out(p) = vol sampled at p + u(p)."""
    if vol.dims != disp.dims:
        raise DimensionMismatchError(f"volume dims {vol.dims} != field dims {disp.dims}")
    return ScalarVolume(_kernels.warp3d(vol.data, disp.data), vol.spacing)


def warp_series(series: BValueSeries, fields) -> BValueSeries:
    """Warp each b-value image by its own field (matching order)."""
    fields = list(fields)
    if len(fields) != series.b_count:
        raise DimensionMismatchError("need exactly one field per b-value")
    return BValueSeries(series.bvalues, tuple(warp(v, f) for v, f in zip(series.volumes, fields)))


def spatial_gradient(disp: DisplacementField) -> np.ndarray:
    """Per-voxel Jacobian J[..., c, a] = d u_c / d x_a, in voxel/voxel.

    Central differences at interior voxels, one-sided at the borders;
    requires at least 2 voxels along every axis.
    """
    dims = disp.dims
    if min(dims) < 2:
        raise ValueError("need dims >= 2 along every axis to differentiate")
    jac = np.empty(dims + (3, 3), dtype=np.float64)
    for c in range(3):
        for a in range(3):
            jac[..., c, a] = np.gradient(disp.data[..., c], axis=a)
    return jac


def normalize_series(series: BValueSeries):
    """Scale the whole series by 1 / max(S at b=0).

    Returns (normalized series, scale).  ADC estimates are invariant under
    this scaling; log-S0 shifts by log(scale).
    """
    scale = float(series.volumes[0].data.max())
    if scale <= 0.0:
        raise DegenerateSeriesError(f"degenerate series: max(S0) = {scale}")
    if scale == 1.0:
        return series, 1.0
    vols = tuple(ScalarVolume(v.data / scale, v.spacing) for v in series.volumes)
    return BValueSeries(series.bvalues, vols), scale


def compose_displacements(last: DisplacementField, prev: DisplacementField) -> DisplacementField:
    """Single field equivalent to warping by `prev` and then by `last`.

    warp(warp(v, prev), last) == warp(v, composed) up to interpolation of
    `prev` at off-grid points: composed(p) = last(p) + prev(p + last(p)).
    """
    if last.dims != prev.dims:
        raise DimensionMismatchError("fields must share dims")
    out = np.empty_like(prev.data)
    for c in range(3):
        out[..., c] = _kernels.warp3d(np.ascontiguousarray(prev.data[..., c]), last.data)
    out += last.data
    return DisplacementField(out)
