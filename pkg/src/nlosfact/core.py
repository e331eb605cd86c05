"""Confocal scan geometry and the shared value types.

Coordinates: the visible wall is the plane z = 0 and the hidden volume sits
at z > 0. Wall samples are laid out on the same (x, y) lattice as the voxel
centers. Voxels are flattened row-major over [x][y][z]; wall samples are
flattened row-major over [sample_x][sample_y].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

LIGHT_SPEED = 299_792_458.0


class GeometryError(ValueError):
    """Raised for inconsistent or degenerate scan geometry."""


@dataclass(frozen=True)
class ScanGeometry:
    wall_samples_per_axis: int
    voxel_grid: tuple[int, int, int]
    wall_extent: float
    volume_origin_z: float
    voxel_pitch: float
    time_bins: int
    bin_width: float
    light_speed: float = LIGHT_SPEED
    falloff_exponent: int = 4

    def __post_init__(self):
        object.__setattr__(self, "voxel_grid", tuple(int(k) for k in self.voxel_grid))
        n = self.wall_samples_per_axis
        if n < 1 or self.time_bins < 1 or min(self.voxel_grid) < 1 or len(self.voxel_grid) != 3:
            raise GeometryError("all counts must be >= 1")
        if not (self.bin_width > 0 and self.light_speed > 0 and self.voxel_pitch > 0):
            raise GeometryError("bin_width, light_speed and voxel_pitch must be positive")
        if self.volume_origin_z <= 0:
            raise GeometryError("hidden volume must lie strictly behind the wall (z > 0)")
        if self.falloff_exponent not in (2, 4):
            raise GeometryError(f"falloff_exponent must be 2 or 4, got {self.falloff_exponent}")
        nx, ny, _ = self.voxel_grid
        if nx != n or ny != n:
            raise GeometryError("wall samples must coincide with voxel columns (Nx = Ny = N)")
        if not math.isclose(self.wall_extent, n * self.voxel_pitch, rel_tol=1e-9):
            raise GeometryError("wall_extent must equal N * voxel_pitch")

    @classmethod
    def desk(
        cls,
        n: int,
        nz: int | None = None,
        wall_extent: float = 1.0,
        standoff: float = 0.5,
        bins_per_voxel: int = 8,
        falloff_exponent: int = 4,
        light_speed: float = LIGHT_SPEED,
    ) -> ScanGeometry:
        """Geometry whose time window just covers the farthest voxel.

        One time bin spans ``voxel_pitch / bins_per_voxel`` of one-way distance.
        """
        nz = n if nz is None else nz
        pitch = wall_extent / n
        bin_width = 2.0 * pitch / bins_per_voxel / light_speed
        span = wall_extent - pitch
        far = math.sqrt(2 * span**2 + (standoff + nz * pitch) ** 2)
        time_bins = int(math.ceil(2 * far / (light_speed * bin_width))) + 2
        return cls(n, (n, n, nz), wall_extent, standoff, pitch, time_bins, bin_width,
                   light_speed, falloff_exponent)

    @property
    def n_samples(self) -> int:
        return self.wall_samples_per_axis**2

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.voxel_grid
        return nx * ny * nz

    @property
    def transient_shape(self) -> tuple[int, int, int]:
        n = self.wall_samples_per_axis
        return (n, n, self.time_bins)

    def axis_centers(self, axis: int) -> np.ndarray:
        k = np.arange(self.voxel_grid[axis]) + 0.5
        if axis == 2:
            return self.volume_origin_z + k * self.voxel_pitch
        return -self.wall_extent / 2 + k * self.voxel_pitch

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the hidden volume in meters."""
        half = self.wall_extent / 2
        lo = np.array([-half, -half, self.volume_origin_z])
        hi = lo + np.array(self.voxel_grid) * self.voxel_pitch
        return lo, hi

    @cached_property
    def sample_positions(self) -> np.ndarray:
        c = self.axis_centers(0)
        sx, sy = np.meshgrid(c, c, indexing="ij")
        pts = np.stack([sx.ravel(), sy.ravel(), np.zeros(sx.size)], axis=1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def voxel_centers(self) -> np.ndarray:
        gx, gy, gz = np.meshgrid(*(self.axis_centers(a) for a in range(3)), indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        pts.setflags(write=False)
        return pts

    def to_dict(self) -> dict:
        return {
            "wall_samples_per_axis": self.wall_samples_per_axis,
            "voxel_grid": list(self.voxel_grid),
            "wall_extent": self.wall_extent,
            "volume_origin_z": self.volume_origin_z,
            "voxel_pitch": self.voxel_pitch,
            "time_bins": self.time_bins,
            "bin_width": self.bin_width,
            "light_speed": self.light_speed,
            "falloff_exponent": self.falloff_exponent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScanGeometry:
        if "desk" in d:
            return cls.desk(**d["desk"])
        return cls(**{**d, "voxel_grid": tuple(d["voxel_grid"])})


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TransientImage:
    """Photon flux histograms indexed [sample_x][sample_y][time_bin]."""

    geometry: ScanGeometry
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != self.geometry.transient_shape:
            raise GeometryError(f"transient shape {data.shape} != {self.geometry.transient_shape}")
        if np.any(data < 0) or not np.all(np.isfinite(data)):
            raise ValueError("transient image must be finite and nonnegative")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True, eq=False)
class AlbedoVolume:
    geometry: ScanGeometry
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.shape != self.geometry.voxel_grid:
            raise GeometryError(f"volume shape {data.shape} != {self.geometry.voxel_grid}")
        if np.any(data < 0) or not np.all(np.isfinite(data)):
            raise ValueError("albedo volume must be finite and nonnegative")
        object.__setattr__(self, "data", data)

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel()


@dataclass(frozen=True, eq=False)
class NormalField:
    """Per-voxel normal angles; u is azimuth, v is polar angle from +z."""

    angles_u: np.ndarray
    angles_v: np.ndarray

    def __post_init__(self):
        u, v = _frozen(self.angles_u), _frozen(self.angles_v)
        if u.shape != v.shape:
            raise GeometryError("angle arrays must have matching shapes")
        object.__setattr__(self, "angles_u", u)
        object.__setattr__(self, "angles_v", v)

    @classmethod
    def facing(cls, shape, direction=(0.0, 0.0, -1.0)) -> NormalField:
        u, v = angles_from_normal(np.asarray(direction, dtype=float))
        return cls(np.full(shape, u), np.full(shape, v))

    @property
    def vectors(self) -> np.ndarray:
        """Unit normals, shape (n_voxels, 3)."""
        return normal_from_angles(self.angles_u.ravel(), self.angles_v.ravel())

    def jacobians(self) -> tuple[np.ndarray, np.ndarray]:
        return normal_jacobian(self.angles_u.ravel(), self.angles_v.ravel())


@dataclass(frozen=True, eq=False)
class VisibilityField:
    """Occlusion factors indexed [wall_sample][voxel]."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise GeometryError("visibility must be a (n_samples, n_voxels) array")
        if np.any(data < 0) or np.any(data > 1):
            raise ValueError("visibility entries must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @classmethod
    def ones(cls, geometry: ScanGeometry) -> VisibilityField:
        return cls(np.ones((geometry.n_samples, geometry.n_voxels)))

    def check(self, geometry: ScanGeometry):
        if self.data.shape != (geometry.n_samples, geometry.n_voxels):
            raise GeometryError(
                f"visibility shape {self.data.shape} != {(geometry.n_samples, geometry.n_voxels)}")


class BinWeights(NamedTuple):
    bin_lo: np.ndarray | int
    w_lo: np.ndarray | float
    w_hi: np.ndarray | float
    in_range: np.ndarray | bool


def normal_from_angles(u, v) -> np.ndarray:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    sv = np.sin(v)
    return np.stack([np.cos(u) * sv, np.sin(u) * sv, np.cos(v)], axis=-1)


def normal_jacobian(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of ``normal_from_angles`` w.r.t. u and v."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    su, cu, sv, cv = np.sin(u), np.cos(u), np.sin(v), np.cos(v)
    du = np.stack([-su * sv, cu * sv, np.zeros_like(u)], axis=-1)
    dv = np.stack([cu * cv, su * cv, -sv], axis=-1)
    return du, dv


def angles_from_normal(n) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    # arctan2 stays accurate near the poles where arccos(n_z) loses digits
    v = np.arctan2(np.hypot(n[..., 0], n[..., 1]), n[..., 2])
    u = np.arctan2(n[..., 1], n[..., 0])
    return u, v


def direction_voxel_to_sample(geometry: ScanGeometry, voxel: int, sample: int):
    """Unit direction from voxel center to wall sample, and the distance."""
    if not (0 <= voxel < geometry.n_voxels and 0 <= sample < geometry.n_samples):
        raise IndexError("voxel or sample index out of range")
    d = geometry.sample_positions[sample] - geometry.voxel_centers[voxel]
    r = float(np.sqrt(d @ d))
    if r == 0.0:
        raise GeometryError("voxel center coincides with a wall sample")
    return d / r, r


def time_bin_weights(geometry: ScanGeometry, r) -> BinWeights:
    """Split the round-trip arrival time of distance ``r`` across two bins.

    Out-of-range arrivals (b < 0 or b >= T - 1) come back with zero weights
    and ``in_range`` False so callers can drop them.
    """
    b = 2.0 * np.asarray(r, dtype=float) / (geometry.light_speed * geometry.bin_width)
    lo = np.floor(b)
    frac = b - lo
    ok = (b >= 0) & (b < geometry.time_bins - 1)
    lo = np.where(ok, lo, 0).astype(np.int64)
    w_lo = np.where(ok, 1.0 - frac, 0.0)
    w_hi = np.where(ok, frac, 0.0)
    if lo.ndim == 0:
        return BinWeights(int(lo), float(w_lo), float(w_hi), bool(ok))
    return BinWeights(lo, w_lo, w_hi, ok)


def falloff(geometry: ScanGeometry, r):
    out = np.asarray(r, dtype=float) ** (-geometry.falloff_exponent)
    return float(out) if out.ndim == 0 else out
