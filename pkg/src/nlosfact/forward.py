"""Factored confocal light transport: scenes, visibility, forward and adjoint.

The system matrix is never formed. Every (wall sample, voxel) pair is one
light path with a fixed distance, direction, falloff and pair of time-bin
weights; those are tabulated once per geometry in :class:`PathTable` and the
forward/adjoint products scatter into / gather from the transient image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from .core import (
    AlbedoVolume,
    GeometryError,
    NormalField,
    ScanGeometry,
    TransientImage,
    VisibilityField,
    direction_voxel_to_sample,
    falloff,
    normal_from_angles,
    time_bin_weights,
)

log = logging.getLogger(__name__)

DENSE_ENTRY_LIMIT = 10**8
_BOUNDS_TOL = 1e-9


class SceneBoundsError(GeometryError):
    """A primitive extends outside the hidden volume."""


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class RectPatch:
    """Wall-parallel patch one voxel thick, centered at (x, y) at depth z."""

    center: tuple[float, float]
    size: tuple[float, float]
    z: float
    albedo: float = 1.0
    normal: tuple[float, float] = (0.0, np.pi)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    albedo: float = 1.0
    normal: tuple[float, float] = (0.0, np.pi)


@dataclass(frozen=True, eq=False)
class VoxelImport:
    """Explicit occupancy mask on the voxel grid with optional per-voxel normals."""

    mask: np.ndarray
    albedo: float = 1.0
    normal: tuple[float, float] = (0.0, np.pi)
    normal_u: np.ndarray | None = None
    normal_v: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: list = field(default_factory=list)
    occluder_threshold: float = 0.0

    def __post_init__(self):
        for p in self.primitives:
            if not p.albedo > 0 or p.albedo > 1:
                raise ValueError(f"primitive albedo must lie in (0, 1], got {p.albedo}")


def _inside(coords, lo, hi):
    return (coords >= lo - _BOUNDS_TOL) & (coords <= hi + _BOUNDS_TOL)


def _primitive_mask(p, geometry: ScanGeometry) -> np.ndarray:
    vlo, vhi = geometry.bounds()
    xs, ys, zs = (geometry.axis_centers(a) for a in range(3))
    half = geometry.voxel_pitch / 2
    if isinstance(p, RectPatch):
        cx, cy = p.center
        w, h = p.size
        lo = np.array([cx - w / 2, cy - h / 2, p.z])
        hi = np.array([cx + w / 2, cy + h / 2, p.z])
        if np.any(lo < vlo - _BOUNDS_TOL) or np.any(hi > vhi + _BOUNDS_TOL):
            raise SceneBoundsError(f"rect patch {p} outside hidden volume")
        mx = _inside(xs, lo[0], hi[0])
        my = _inside(ys, lo[1], hi[1])
        # the slab [zc - p/2, zc + p/2) that holds the plane
        mz = (zs - half <= p.z + _BOUNDS_TOL) & (p.z + _BOUNDS_TOL < zs + half)
        if not mz.any():
            mz = np.zeros_like(mz)
            mz[np.argmin(np.abs(zs - p.z))] = True
    elif isinstance(p, Box):
        lo, hi = np.asarray(p.lo, float), np.asarray(p.hi, float)
        if np.any(lo < vlo - _BOUNDS_TOL) or np.any(hi > vhi + _BOUNDS_TOL) or np.any(lo > hi):
            raise SceneBoundsError(f"box {p} outside hidden volume")
        mx, my, mz = (_inside(c, lo[a], hi[a]) for a, c in enumerate((xs, ys, zs)))
    elif isinstance(p, VoxelImport):
        mask = np.asarray(p.mask, dtype=bool)
        if mask.shape != geometry.voxel_grid:
            raise SceneBoundsError(f"voxel import of shape {mask.shape} does not fit "
                                   f"grid {geometry.voxel_grid}")
        return mask
    else:
        raise TypeError(f"unknown primitive {type(p).__name__}")
    return mx[:, None, None] & my[None, :, None] & mz[None, None, :]


def rasterize_scene(scene: Scene, geometry: ScanGeometry) -> tuple[AlbedoVolume, NormalField]:
    """Voxelize primitives in declaration order; later primitives overwrite earlier ones."""
    shape = geometry.voxel_grid
    rho = np.zeros(shape)
    u = np.zeros(shape)
    v = np.zeros(shape)
    for p in scene.primitives:
        m = _primitive_mask(p, geometry)
        rho[m] = p.albedo
        pu = getattr(p, "normal_u", None)
        pv = getattr(p, "normal_v", None)
        u[m] = p.normal[0] if pu is None else np.asarray(pu)[m]
        v[m] = p.normal[1] if pv is None else np.asarray(pv)[m]
    return AlbedoVolume(geometry, rho), NormalField(u, v)


# --------------------------------------------------------------------------
# visibility


def _march(occ, geometry, start, target, target_idx, t_min=1e-9):
    """Vectorized voxel traversal; True where a segment crosses an occupied voxel.

    Voxels within Chebyshev distance 1 of the target voxel never block, and
    crossings shorter than ``t_min`` (edge and corner grazes) are ignored.
    """
    lo, hi = geometry.bounds()
    pitch = geometry.voxel_pitch
    dims = np.array(geometry.voxel_grid)
    d = target - start
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - start) * inv
        t2 = (hi - start) * inv
    t1 = np.where(d == 0, -np.inf, t1)
    t2 = np.where(d == 0, np.inf, t2)
    t_enter = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)

    p = start + d * t_enter[:, None]
    cur = np.clip(np.floor((p - lo) / pitch).astype(np.int64), 0, dims - 1)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_face = lo + (cur + (step > 0)) * pitch
        t_max = np.where(d != 0, (next_face - start) * inv, np.inf)
        t_delta = np.where(d != 0, pitch * np.abs(inv), np.inf)

    blocked = np.zeros(len(start), dtype=bool)
    active = np.ones(len(start), dtype=bool)
    t_in = t_enter.copy()
    for _ in range(int(dims.sum()) + 3):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        c = cur[idx]
        t_out = np.minimum(t_max[idx].min(axis=1), 1.0)
        near = np.abs(c - target_idx[idx]).max(axis=1) <= 1
        hit = occ[c[:, 0], c[:, 1], c[:, 2]] & ~near & (t_out - t_in[idx] > t_min)
        blocked[idx] |= hit
        axis = t_max[idx].argmin(axis=1)
        t_next = t_max[idx, axis]
        cur[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
        t_in[idx] = t_next
        inside = np.all((cur[idx] >= 0) & (cur[idx] < dims), axis=1)
        active[idx] = ~hit & (t_next < 1.0) & inside
    return blocked


def ground_truth_visibility(
    albedo: AlbedoVolume,
    geometry: ScanGeometry,
    occluder_threshold: float = 0.0,
    rays_per_pair: int = 1,
    seed: int = 0,
    chunk: int = 1 << 17,
) -> VisibilityField:
    """Fraction of unblocked rays from each wall sample into each occupied voxel.

    With one ray per pair the ray ends at the voxel center; with more, ray
    targets are jittered uniformly inside the voxel from a seeded generator.
    Empty voxels reflect nothing, so their entries stay at one.
    """
    if rays_per_pair < 1:
        raise ValueError("rays_per_pair must be >= 1")
    occ = albedo.data > occluder_threshold
    S = geometry.n_samples
    vis = np.ones((S, geometry.n_voxels))
    targets = np.flatnonzero(albedo.data.ravel() > 0)
    if not occ.any() or targets.size == 0:
        return VisibilityField(vis)
    rng = np.random.default_rng(seed)
    samples = geometry.sample_positions
    centers = geometry.voxel_centers
    grid_idx = np.stack(np.unravel_index(targets, geometry.voxel_grid), axis=1)
    M = S * targets.size
    pair_i, pair_k = np.divmod(np.arange(M), targets.size)
    unblocked = np.zeros(M)
    for _ in range(rays_per_pair):
        jitter = (rng.uniform(-0.5, 0.5, size=(M, 3)) * geometry.voxel_pitch
                  if rays_per_pair > 1 else None)
        for a in range(0, M, chunk):
            sl = slice(a, min(a + chunk, M))
            tgt = centers[targets[pair_k[sl]]]
            if jitter is not None:
                tgt = tgt + jitter[sl]
            hit = _march(occ, geometry, samples[pair_i[sl]], tgt, grid_idx[pair_k[sl]])
            unblocked[sl] += ~hit
    vis[:, targets] = (unblocked / rays_per_pair).reshape(S, targets.size)
    return VisibilityField(vis)


# --------------------------------------------------------------------------
# light transport


@dataclass(frozen=True, eq=False)
class PathTable:
    """Per (sample, voxel) path quantities, each shaped (n_samples, n_voxels)."""

    distance: np.ndarray
    direction: np.ndarray  # (S, J, 3), voxel -> sample
    attenuation: np.ndarray
    row_lo: np.ndarray  # flat index sample * T + bin_lo
    w_lo: np.ndarray
    w_hi: np.ndarray
    n_rows: int

    def columns(self, cols) -> PathTable:
        """Restriction to a subset of voxel columns."""
        return PathTable(self.distance[:, cols], self.direction[:, cols], self.attenuation[:, cols],
                         self.row_lo[:, cols], self.w_lo[:, cols], self.w_hi[:, cols], self.n_rows)


@lru_cache(maxsize=4)
def path_table(geometry: ScanGeometry) -> PathTable:
    diff = geometry.sample_positions[:, None, :] - geometry.voxel_centers[None, :, :]
    r = np.sqrt(np.einsum("sjk,sjk->sj", diff, diff))
    if np.any(r == 0):
        raise GeometryError("a voxel center coincides with a wall sample")
    direction = diff / r[..., None]
    bw = time_bin_weights(geometry, r)
    rows = np.arange(geometry.n_samples)[:, None] * geometry.time_bins + bw.bin_lo
    dropped = int((~bw.in_range).sum())
    if dropped:
        log.debug("%d paths fall outside the time window and are dropped", dropped)
    tbl = PathTable(r, direction, falloff(geometry, r), rows, bw.w_lo, bw.w_hi,
                    geometry.n_samples * geometry.time_bins)
    for a in (tbl.distance, tbl.direction, tbl.attenuation, tbl.row_lo, tbl.w_lo, tbl.w_hi):
        a.setflags(write=False)
    return tbl


@dataclass(frozen=True, eq=False)
class FactoredModel:
    """Visibility and normals that pin down the linear map from albedo to transient.

    ``normals=None`` models isotropic scatterers (the foreshortening factor is 1).
    """

    geometry: ScanGeometry
    visibility: VisibilityField
    normals: NormalField | None = None

    def __post_init__(self):
        self.visibility.check(self.geometry)
        if self.normals is not None and self.normals.angles_u.size != self.geometry.n_voxels:
            raise GeometryError("normal field does not match the voxel grid")

    @classmethod
    def unoccluded(cls, geometry: ScanGeometry, normals: NormalField | None = None):
        return cls(geometry, VisibilityField.ones(geometry), normals)

    @property
    def isotropic(self) -> bool:
        return self.normals is None

    def cosines(self) -> np.ndarray:
        """Signed omega . n per path, shape (S, J)."""
        tbl = path_table(self.geometry)
        return np.einsum("sjk,jk->sj", tbl.direction, self.normals.vectors)

    def shading(self) -> np.ndarray | float:
        if self.normals is None:
            return 1.0
        return np.maximum(self.cosines(), 0.0)

    def path_gain(self) -> np.ndarray:
        """falloff * V * max(0, omega . n) per path."""
        tbl = path_table(self.geometry)
        return tbl.attenuation * self.visibility.data * self.shading()


def scatter_paths(tbl: PathTable, contrib: np.ndarray) -> np.ndarray:
    """Deposit per-path flux into the flat (sample * T + bin) transient."""
    rows = tbl.row_lo.ravel()
    c = contrib.ravel()
    out = np.bincount(rows, weights=c * tbl.w_lo.ravel(), minlength=tbl.n_rows + 1)
    out += np.bincount(rows + 1, weights=c * tbl.w_hi.ravel(), minlength=tbl.n_rows + 1)
    return out[: tbl.n_rows]


def gather_paths(tbl: PathTable, flat_transient: np.ndarray) -> np.ndarray:
    """Interpolated transient value at each path's arrival time, shape (S, J)."""
    padded = np.append(flat_transient, 0.0)
    return tbl.w_lo * padded[tbl.row_lo] + tbl.w_hi * padded[tbl.row_lo + 1]


class TransportOperator:
    """Linear albedo -> transient map for a fixed model, as matvec/rmatvec pair.

    With ``assemble=True`` the path weights are packed once into a sparse
    matrix, which is several times faster for iterative solvers; the default
    scatter/gather route never stores the matrix.
    """

    def __init__(self, model: FactoredModel, assemble: bool = False):
        self.model = model
        self.geometry = model.geometry
        self.table = path_table(model.geometry)
        self.gain = model.path_gain()
        self.matrix = self._assemble() if assemble else None

    def _assemble(self):
        tbl = self.table
        S, J = self.gain.shape
        cols = np.broadcast_to(np.arange(J), (S, J)).ravel()
        rows = tbl.row_lo.ravel()
        lo = (self.gain * tbl.w_lo).ravel()
        hi = (self.gain * tbl.w_hi).ravel()
        keep_lo, keep_hi = lo != 0, hi != 0
        data = np.concatenate([lo[keep_lo], hi[keep_hi]])
        r = np.concatenate([rows[keep_lo], rows[keep_hi] + 1])
        c = np.concatenate([cols[keep_lo], cols[keep_hi]])
        A = sparse.csr_matrix((data, (r, c)), shape=(tbl.n_rows, J))
        return A, A.T.tocsr()

    def matvec(self, rho: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            flat = self.matrix[0] @ np.ravel(rho)
        else:
            flat = scatter_paths(self.table, self.gain * np.ravel(rho)[None, :])
        return flat.reshape(self.geometry.transient_shape)

    def rmatvec(self, transient: np.ndarray) -> np.ndarray:
        if self.matrix is not None:
            return (self.matrix[1] @ np.ravel(transient)).reshape(self.geometry.voxel_grid)
        back = gather_paths(self.table, np.ravel(transient))
        return np.einsum("sj,sj->j", self.gain, back).reshape(self.geometry.voxel_grid)


def forward_transient(model: FactoredModel, albedo: AlbedoVolume) -> TransientImage:
    tau = TransportOperator(model).matvec(albedo.data)
    return TransientImage(model.geometry, np.maximum(tau, 0.0))


def adjoint_transient(model: FactoredModel, residual) -> np.ndarray:
    data = residual.data if isinstance(residual, TransientImage) else np.asarray(residual)
    return TransportOperator(model).rmatvec(data)


def dense_system_matrix(model: FactoredModel) -> np.ndarray:
    """Explicit system matrix built path by path from the scalar formulas.

    Rows are flat transient indices (sample * T + bin), columns flat voxels.
    Only meant for tiny grids; it is the reference the matrix-free code is
    checked against.
    """
    g = model.geometry
    rows, cols = g.n_samples * g.time_bins, g.n_voxels
    if rows * cols > DENSE_ENTRY_LIMIT:
        raise MemoryError(f"dense system matrix would have {rows * cols} entries "
                          f"(limit {DENSE_ENTRY_LIMIT})")
    A = np.zeros((rows, cols))
    V = model.visibility.data
    if model.normals is not None:
        u = model.normals.angles_u.ravel()
        v = model.normals.angles_v.ravel()
    for i in range(g.n_samples):
        for j in range(cols):
            omega, r = direction_voxel_to_sample(g, j, i)
            bw = time_bin_weights(g, r)
            if not bw.in_range:
                continue
            shade = 1.0
            if model.normals is not None:
                shade = max(0.0, float(omega @ normal_from_angles(u[j], v[j])))
            a = falloff(g, r) * V[i, j] * shade
            A[i * g.time_bins + bw.bin_lo, j] += a * bw.w_lo
            A[i * g.time_bins + bw.bin_lo + 1, j] += a * bw.w_hi
    return A


def forward_dense_oracle(model: FactoredModel, albedo: AlbedoVolume) -> TransientImage:
    A = dense_system_matrix(model)
    tau = A @ albedo.data.ravel()
    return TransientImage(model.geometry, tau.reshape(model.geometry.transient_shape))


# --------------------------------------------------------------------------
# noise


def add_poisson_noise(tau: TransientImage, photons_at_peak: float, seed=0) -> TransientImage:
    """Photon-count noise with the brightest bin scaled to ``photons_at_peak``."""
    if photons_at_peak < 1:
        raise ValueError("photons_at_peak must be >= 1")
    peak = tau.data.max()
    if peak == 0:
        return TransientImage(tau.geometry, np.zeros_like(tau.data))
    rng = np.random.default_rng(seed)
    scale = photons_at_peak / peak
    counts = rng.poisson(tau.data * scale)
    return TransientImage(tau.geometry, counts / scale)
