"""PSNR scoring, ground-truth reference solves and the desk-scale benchmark suite."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import AlbedoVolume, NormalField, ScanGeometry, TransientImage, VisibilityField
from .forward import (
    FactoredModel,
    RectPatch,
    Scene,
    TransportOperator,
    VoxelImport,
    add_poisson_noise,
    forward_transient,
    ground_truth_visibility,
    rasterize_scene,
)
from .recon_factored import FactoredSolverConfig, als_factorize
from .recon_linear import (
    LinearSolverConfig,
    admm_linear_solve,
    backproject,
    filtered_backproject,
)

log = logging.getLogger(__name__)

METHOD_LABELS = ("BP", "FBP", "Lin", "Factored", "Lin w/ V", "Lin w/ N+V")
PSNR_PEAK = "max(truth)"


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, AlbedoVolume) else np.asarray(x, dtype=float)


def mse(estimate, truth) -> float:
    e, t = _data(estimate), _data(truth)
    if e.shape != t.shape:
        raise ValueError(f"shape mismatch: {e.shape} vs {t.shape}")
    return float(np.mean((e - t) ** 2))


def psnr(estimate, truth) -> float:
    """10 log10(max(truth)^2 / MSE); ``math.inf`` marks an exact match."""
    t = _data(truth)
    err = mse(estimate, t)
    peak = float(t.max())
    if peak <= 0:
        raise ValueError("truth volume has no positive entry")
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def reference_solution(tau, geometry: ScanGeometry, gt_visibility: VisibilityField,
                       gt_normals: NormalField | None = None,
                       linear_config: LinearSolverConfig | None = None) -> AlbedoVolume:
    """Linear ADMM solve with the true visibility (and optionally normals) held fixed."""
    gt_visibility.check(geometry)
    if gt_normals is not None and gt_normals.angles_u.shape != geometry.voxel_grid:
        raise ValueError("normal field does not match the voxel grid")
    return admm_linear_solve(FactoredModel(geometry, gt_visibility, gt_normals), tau, linear_config)


def fit_scale(tau, albedo: AlbedoVolume) -> AlbedoVolume:
    """Rescale by the least-squares gain against the measurement under the plain model.

    Backprojections live in arbitrary units; this puts them on the albedo scale
    without looking at the ground truth.
    """
    pred = TransportOperator(FactoredModel.unoccluded(albedo.geometry)).matvec(albedo.data).ravel()
    denom = float(pred @ pred)
    s = float(pred @ _data_tau(tau).ravel()) / denom if denom > 0 else 0.0
    return AlbedoVolume(albedo.geometry, max(s, 0.0) * albedo.data)


def _data_tau(tau) -> np.ndarray:
    return tau.data if isinstance(tau, TransientImage) else np.asarray(tau, dtype=float)


# --------------------------------------------------------------------------
# scene suite
#
# Coordinates are fractions of the wall extent; depth is measured from the
# front face of the hidden volume as a fraction of its depth.


def _sphere_cap(geometry: ScanGeometry, center, radius, albedo=1.0) -> VoxelImport:
    """Wall-facing half of a one-voxel-thick spherical shell with outward normals."""
    ext = geometry.wall_extent
    depth = geometry.voxel_grid[2] * geometry.voxel_pitch
    c = np.array([center[0] * ext, center[1] * ext, geometry.volume_origin_z + center[2] * depth])
    r = radius * ext
    pts = geometry.voxel_centers.reshape(geometry.voxel_grid + (3,))
    d = pts - c
    dist = np.linalg.norm(d, axis=-1)
    outward = d / np.maximum(dist, 1e-12)[..., None]
    mask = (np.abs(dist - r) <= geometry.voxel_pitch / 2) & (outward[..., 2] < 0)
    v = np.arccos(np.clip(outward[..., 2], -1.0, 1.0))
    u = np.arctan2(outward[..., 1], outward[..., 0])
    return VoxelImport(mask, albedo, normal_u=u, normal_v=v)


def _patch(geometry, center, size, depth, albedo=1.0) -> RectPatch:
    ext = geometry.wall_extent
    z = geometry.volume_origin_z + depth * geometry.voxel_grid[2] * geometry.voxel_pitch
    return RectPatch((center[0] * ext, center[1] * ext), (size[0] * ext, size[1] * ext), z, albedo)


def _frame(geometry, center, outer, bar, depth) -> list[RectPatch]:
    cx, cy = center
    off = (outer - bar) / 2
    return [_patch(geometry, (cx, cy - off), (outer, bar), depth),
            _patch(geometry, (cx, cy + off), (outer, bar), depth),
            _patch(geometry, (cx - off, cy), (bar, outer), depth),
            _patch(geometry, (cx + off, cy), (bar, outer), depth)]


def build_scene(name: str, geometry: ScanGeometry) -> Scene:
    g = geometry
    if name == "single_plane":
        prims = [_patch(g, (0.0, 0.0), (0.6, 0.6), 0.45)]
    elif name == "two_planes":
        # a small occluder close to the wall, offset so the rear plane is partly visible
        prims = [_patch(g, (-0.1, -0.1), (0.35, 0.35), 0.1),
                 _patch(g, (0.0, 0.0), (0.6, 0.6), 0.8)]
    elif name == "plane_emblem":
        # a plus-shaped emblem in front of a large backdrop
        prims = [_patch(g, (0.0, 0.0), (0.75, 0.75), 0.65),
                 _patch(g, (-0.05, 0.0), (0.45, 0.12), 0.1),
                 _patch(g, (-0.05, 0.0), (0.12, 0.45), 0.1)]
    elif name == "two_spheres":
        prims = [_sphere_cap(g, (0.1, 0.1, 0.65), 0.25),
                 _sphere_cap(g, (-0.12, -0.1, 0.3), 0.15)]
    elif name == "interlocking":
        # two square frames at different depths overlapping like chain links
        prims = _frame(g, (0.12, 0.04), 0.55, 0.13, 0.6) + _frame(g, (-0.14, -0.04), 0.45, 0.13, 0.3)
    else:
        raise KeyError(f"unknown scene {name!r}; choose from {SCENE_NAMES}")
    return Scene(prims)


SCENE_NAMES = ("single_plane", "two_planes", "plane_emblem", "two_spheres", "interlocking")
OCCLUDED_SCENES = SCENE_NAMES[1:]


@dataclass(frozen=True)
class BenchmarkCase:
    scene: str
    n: int = 16
    lambertian: bool = False

    @property
    def variant(self) -> str:
        return "lambertian" if self.lambertian else "isotropic"


def bundled_suite(n_values=(8, 16), variants=("isotropic", "lambertian"),
                  scenes=SCENE_NAMES) -> list[BenchmarkCase]:
    return [BenchmarkCase(s, n, v == "lambertian") for n in n_values for v in variants for s in scenes]


@dataclass(frozen=True)
class BenchmarkConfig:
    photons_at_peak: float | None = None
    linear: LinearSolverConfig = field(default_factory=LinearSolverConfig)
    factored: FactoredSolverConfig = field(default_factory=FactoredSolverConfig)
    fbp_threshold_quantile: float = 0.0
    rescale_backprojection: bool = True
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.linear, dict):
            object.__setattr__(self, "linear", LinearSolverConfig(**self.linear))
        if isinstance(self.factored, dict):
            object.__setattr__(self, "factored", FactoredSolverConfig(**self.factored))
        if self.photons_at_peak is not None and self.photons_at_peak < 1:
            raise ValueError("photons_at_peak must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    scene: str
    n: int
    variant: str
    photons_at_peak: float | None
    psnr: dict[str, float] = field(default_factory=dict)
    mse: dict[str, float] = field(default_factory=dict)
    runtime: dict[str, float] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    psnr_peak: str = PSNR_PEAK

    def __post_init__(self):
        for d in (self.psnr, self.mse, self.runtime, self.errors):
            bad = set(d) - set(METHOD_LABELS)
            if bad:
                raise ValueError(f"unknown method labels {sorted(bad)}")

    def infinite(self, method: str) -> bool:
        return math.isinf(self.psnr.get(method, 0.0))

    def records(self) -> list[dict]:
        """One flat record per method, JSON-friendly (infinite PSNR becomes null + flag)."""
        out = []
        for m in METHOD_LABELS:
            if m not in self.psnr and m not in self.errors:
                continue
            p = self.psnr.get(m)
            out.append({
                "scene": self.scene, "n": self.n, "variant": self.variant,
                "photons_at_peak": self.photons_at_peak, "method": m,
                "psnr_db": None if p is None or math.isinf(p) else p,
                "psnr_infinite": p is not None and math.isinf(p),
                "mse": self.mse.get(m), "runtime_s": self.runtime.get(m),
                "error": self.errors.get(m), "psnr_peak": self.psnr_peak,
            })
        return out


def format_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per (scene, variant, noise)."""
    methods = [m for m in METHOD_LABELS if any(m in r.psnr or m in r.errors for r in reports)]
    head = ["scene", "N", "variant", "photons"] + methods
    rows = []
    for r in reports:
        cells = [r.scene, str(r.n), r.variant,
                 "-" if r.photons_at_peak is None else f"{r.photons_at_peak:.0e}"]
        for m in methods:
            if m in r.errors:
                cells.append("error")
            elif m not in r.psnr:
                cells.append("")
            else:
                cells.append("inf" if r.infinite(m) else f"{r.psnr[m]:.2f}")
        rows.append(cells)
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([line(head), line(["-" * w for w in widths])] + [line(c) for c in rows])


def simulate_case(case: BenchmarkCase, photons_at_peak=None, seed=0):
    """Rasterize, ray-march visibility and render one case. Returns a dict of truths."""
    geometry = ScanGeometry.desk(case.n)
    albedo, normals = rasterize_scene(build_scene(case.scene, geometry), geometry)
    vis = ground_truth_visibility(albedo, geometry)
    model_normals = normals if case.lambertian else None
    tau = forward_transient(FactoredModel(geometry, vis, model_normals), albedo)
    if photons_at_peak is not None:
        tau = add_poisson_noise(tau, photons_at_peak, seed=seed)
    return {"geometry": geometry, "albedo": albedo, "normals": model_normals,
            "visibility": vis, "tau": tau}


def _run_method(method, truth, config: BenchmarkConfig, seed):
    g, tau = truth["geometry"], truth["tau"]
    if method == "BP":
        out = backproject(tau)
        return fit_scale(tau, out) if config.rescale_backprojection else out
    if method == "FBP":
        out = filtered_backproject(tau, config.fbp_threshold_quantile)
        return fit_scale(tau, out) if config.rescale_backprojection else out
    if method == "Lin":
        return admm_linear_solve(FactoredModel.unoccluded(g), tau, config.linear)
    if method == "Factored":
        lambertian = truth["normals"] is not None
        fcfg = FactoredSolverConfig(**{**_shallow(config.factored), "rng_seed": seed,
                                       "estimate_normals": lambertian})
        return als_factorize(tau, g, fcfg).albedo
    if method == "Lin w/ V":
        return reference_solution(tau, g, truth["visibility"], None, config.linear)
    if method == "Lin w/ N+V":
        if truth["normals"] is None:
            raise ValueError("isotropic scene has no normals")
        return reference_solution(tau, g, truth["visibility"], truth["normals"], config.linear)
    raise KeyError(method)


def _shallow(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def _run_case(case: BenchmarkCase, methods, config: BenchmarkConfig, seed: int) -> EvalReport:
    truth = simulate_case(case, config.photons_at_peak, seed)
    report = EvalReport(case.scene, case.n, case.variant, config.photons_at_peak)
    for m in methods:
        if m == "Lin w/ N+V" and not case.lambertian:
            continue
        t0 = time.perf_counter()
        try:
            est = _run_method(m, truth, config, seed)
        except Exception as exc:  # recorded, the rest of the benchmark goes on
            log.warning("%s on %s/%s failed: %s", m, case.scene, case.variant, exc)
            report.errors[m] = f"{type(exc).__name__}: {exc}"
            continue
        report.runtime[m] = time.perf_counter() - t0
        report.mse[m] = mse(est, truth["albedo"])
        report.psnr[m] = psnr(est, truth["albedo"])
    return report


def run_benchmark(scene_list, methods, config: BenchmarkConfig | None = None,
                  seed: int = 0) -> list[EvalReport]:
    """Evaluate every method on every case; method failures end up in ``errors``.

    ``scene_list`` holds BenchmarkCase objects or bare scene names (N=16,
    isotropic). Case k is simulated and solved with a seed derived from
    (seed, k), so results do not depend on the worker count.
    """
    config = config or BenchmarkConfig()
    methods = list(methods)
    unknown = set(methods) - set(METHOD_LABELS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if not methods:
        return []
    cases = [c if isinstance(c, BenchmarkCase) else BenchmarkCase(c) for c in scene_list]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(cases))]
    if config.workers > 1 and len(cases) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            futures = [pool.submit(_run_case, c, methods, config, s) for c, s in zip(cases, seeds)]
            return [f.result() for f in futures]
    return [_run_case(c, methods, config, s) for c, s in zip(cases, seeds)]
