"""File formats, histogram ingestion, MIP rendering and the ``nlosfact`` command line.

Binary layout shared by the three formats (all little-endian)::

    magic     8 bytes   b"TRNSIMG1" | b"NLOSVOL1" | b"NLOSVIS1"
    dims      u32 x 7   N, Nx, Ny, Nz, T, falloff_exponent, channels
    geometry  f64 x 5   wall_extent, volume_origin_z, voxel_pitch, bin_width, light_speed
    payload   f64       row-major; transient [sx][sy][t], volume [c][x][y][z],
                        visibility [sample][voxel]

The trailing digit of the magic is the format version. Volumes carry one
channel for albedo and two (u, v) for normal angles.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import struct
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AlbedoVolume, GeometryError, NormalField, ScanGeometry, TransientImage, VisibilityField

log = logging.getLogger(__name__)

MAGIC_TRANSIENT = b"TRNSIMG1"
MAGIC_VOLUME = b"NLOSVOL1"
MAGIC_VISIBILITY = b"NLOSVIS1"
FORMAT_VERSIONS = {m[:7].decode(): int(m[7:]) for m in (MAGIC_TRANSIENT, MAGIC_VOLUME, MAGIC_VISIBILITY)}
CONFIG_SCHEMA_VERSION = 1
MAX_PAYLOAD_ENTRIES = 2**34  # 128 GiB of float64; anything larger is a corrupt header

_DIMS = struct.Struct("<7I")
_GEOM = struct.Struct("<5d")
_HEADER_SIZE = 8 + _DIMS.size + _GEOM.size
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Base class for unreadable or inconsistent data files."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# binary formats


def _header(magic: bytes, g: ScanGeometry, channels: int) -> bytes:
    nx, ny, nz = g.voxel_grid
    dims = _DIMS.pack(g.wall_samples_per_axis, nx, ny, nz, g.time_bins, g.falloff_exponent, channels)
    geom = _GEOM.pack(g.wall_extent, g.volume_origin_z, g.voxel_pitch, g.bin_width, g.light_speed)
    return magic + dims + geom


def _write(path, magic: bytes, g: ScanGeometry, payload: np.ndarray, channels: int = 1):
    with open(path, "wb") as fh:
        fh.write(_header(magic, g, channels))
        fh.write(np.ascontiguousarray(payload, dtype=_F64).tobytes())


def _payload_shape(magic: bytes, dims) -> tuple[int, ...]:
    n, nx, ny, nz, t, _, ch = dims
    if magic == MAGIC_TRANSIENT:
        return (n, n, t)
    if magic == MAGIC_VOLUME:
        return (ch, nx, ny, nz)
    return (n * n, nx * ny * nz)


def _read(path, magic: bytes):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, shorter than the magic")
    head = raw[:8]
    if head != magic:
        if head[:7] == magic[:7]:
            raise VersionMismatchError(
                f"{path}: format version {head[7:]!r}, this build reads {magic[7:]!r}")
        raise MagicMismatchError(f"{path}: magic {head!r}, expected {magic!r}")
    if len(raw) < _HEADER_SIZE:
        raise TruncatedFileError(f"{path}: header cut short")
    dims = _DIMS.unpack_from(raw, 8)
    ext, z0, pitch, bw, c = _GEOM.unpack_from(raw, 8 + _DIMS.size)
    shape = _payload_shape(magic, dims)
    # Python ints do not wrap, so the product is exact even for hostile headers
    count = 1
    for k in shape:
        count *= k
    if count > MAX_PAYLOAD_ENTRIES:
        raise DimensionOverflowError(f"{path}: header declares {count} entries")
    need = _HEADER_SIZE + 8 * count
    if len(raw) < need:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - _HEADER_SIZE} of {8 * count} bytes")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes")
    n, nx, ny, nz, t, fexp, ch = dims
    try:
        g = ScanGeometry(n, (nx, ny, nz), ext, z0, pitch, t, bw, c, fexp)
    except GeometryError as exc:
        raise FormatError(f"{path}: bad geometry in header: {exc}") from exc
    data = np.frombuffer(raw, dtype=_F64, count=count, offset=_HEADER_SIZE).reshape(shape)
    return g, data.astype(np.float64), ch


def write_transient(path, tau: TransientImage):
    _write(path, MAGIC_TRANSIENT, tau.geometry, tau.data)


def read_transient(path) -> TransientImage:
    g, data, _ = _read(path, MAGIC_TRANSIENT)
    return TransientImage(g, data)


def write_volume(path, volume: AlbedoVolume):
    _write(path, MAGIC_VOLUME, volume.geometry, volume.data[None], channels=1)


def read_volume(path) -> AlbedoVolume:
    g, data, ch = _read(path, MAGIC_VOLUME)
    if ch != 1:
        raise FormatError(f"{path}: {ch}-channel volume, expected albedo (1 channel)")
    return AlbedoVolume(g, data[0])


def write_normals(path, geometry: ScanGeometry, normals: NormalField):
    stack = np.stack([normals.angles_u, normals.angles_v])
    if stack.shape[1:] != geometry.voxel_grid:
        raise GeometryError("normal field does not match the voxel grid")
    _write(path, MAGIC_VOLUME, geometry, stack, channels=2)


def read_normals(path) -> tuple[ScanGeometry, NormalField]:
    g, data, ch = _read(path, MAGIC_VOLUME)
    if ch != 2:
        raise FormatError(f"{path}: {ch}-channel volume, expected normal angles (2 channels)")
    return g, NormalField(data[0], data[1])


def write_visibility(path, geometry: ScanGeometry, visibility: VisibilityField):
    visibility.check(geometry)
    _write(path, MAGIC_VISIBILITY, geometry, visibility.data)


def read_visibility(path) -> tuple[ScanGeometry, VisibilityField]:
    g, data, _ = _read(path, MAGIC_VISIBILITY)
    return g, VisibilityField(data)


# --------------------------------------------------------------------------
# measured histograms


@dataclass(frozen=True, eq=False)
class HistogramBundle:
    """Raw photon counts per confocal sample, stored as an ``.npz`` container.

    ``counts`` is indexed [sx][sy][native_bin]. The scan grid spans
    ``wall_extent`` meters on each side; ``volume_origin_z`` and
    ``falloff_exponent`` describe the hidden volume the data will be
    reconstructed into.
    """

    counts: np.ndarray
    bin_width: float
    wall_extent: float = 1.0
    volume_origin_z: float | None = None
    falloff_exponent: int = 4

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3 or c.shape[0] != c.shape[1]:
            raise ValueError("counts must have shape (N, N, T)")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(np.isfinite(c)) or np.any(c != np.round(c)):
                raise ValueError("counts must be integers")
            c = c.astype(np.int64)
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        c = np.array(c, dtype=np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")

    @property
    def samples_per_axis(self) -> int:
        return self.counts.shape[0]

    def save(self, path):
        np.savez_compressed(
            path, counts=self.counts, bin_width=self.bin_width, wall_extent=self.wall_extent,
            volume_origin_z=np.nan if self.volume_origin_z is None else self.volume_origin_z,
            falloff_exponent=self.falloff_exponent, schema_version=CONFIG_SCHEMA_VERSION)

    @classmethod
    def load(cls, path) -> HistogramBundle:
        with np.load(path) as z:
            missing = {"counts", "bin_width"} - set(z.files)
            if missing:
                raise FormatError(f"{path}: bundle lacks {sorted(missing)}")
            z0 = float(z["volume_origin_z"]) if "volume_origin_z" in z.files else np.nan
            return cls(z["counts"], float(z["bin_width"]),
                       float(z["wall_extent"]) if "wall_extent" in z.files else 1.0,
                       None if np.isnan(z0) else z0,
                       int(z["falloff_exponent"]) if "falloff_exponent" in z.files else 4)


def empty_samples(bundle: HistogramBundle) -> np.ndarray:
    """Mask of samples whose histogram has no counts at all."""
    return bundle.counts.sum(axis=2) == 0


def preprocess_histograms(bundle: HistogramBundle, target_bin_width: float = 16e-12,
                          direct_cut_bins: int = 600) -> TransientImage:
    """Align, rebin and strip direct light from measured histograms.

    Each histogram is rolled so its global maximum (the direct return from
    the wall) sits at bin 0, then summed in groups of
    ``target_bin_width / bin_width`` native bins (the tail is zero-padded so
    no counts are lost), and finally the first ``direct_cut_bins`` output bins
    are zeroed. Samples without counts come out as all-zero histograms.
    """
    ratio = target_bin_width / bundle.bin_width
    factor = int(round(ratio))
    if factor < 1 or not np.isclose(ratio, factor, rtol=1e-9):
        raise ValueError("target_bin_width must be an integer multiple of the native bin width")
    if direct_cut_bins < 0:
        raise ValueError("direct_cut_bins must be >= 0")
    counts = bundle.counts
    n, _, t_native = counts.shape
    empty = empty_samples(bundle)
    if empty.any():
        log.warning("%d of %d samples have no counts; left at zero", int(empty.sum()), n * n)

    peak = counts.argmax(axis=2)
    idx = (np.arange(t_native)[None, None, :] + peak[..., None]) % t_native
    aligned = np.take_along_axis(counts, idx, axis=2)

    t_out = -(-t_native // factor)
    padded = np.zeros((n, n, t_out * factor), dtype=np.int64)
    padded[..., :t_native] = aligned
    binned = padded.reshape(n, n, t_out, factor).sum(axis=3).astype(np.float64)
    binned[..., :direct_cut_bins] = 0.0

    pitch = bundle.wall_extent / n
    z0 = bundle.volume_origin_z if bundle.volume_origin_z is not None else pitch
    g = ScanGeometry(n, (n, n, n), bundle.wall_extent, z0, pitch, t_out, target_bin_width,
                     falloff_exponent=bundle.falloff_exponent)
    return TransientImage(g, binned)


# --------------------------------------------------------------------------
# rendering

_AXES = {"x": 0, "y": 1, "z": 2}


def mip(volume: AlbedoVolume, axis: str) -> np.ndarray:
    """Maximum along ``axis``; the remaining two axes keep their order (rows, cols)."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
    return volume.data.max(axis=_AXES[axis])


def render_mip(volume: AlbedoVolume, axis: str, path) -> np.ndarray:
    """Write the projection as a binary PGM scaled so the volume max maps to 255."""
    proj = mip(volume, axis)
    top = float(volume.data.max())
    img = np.zeros(proj.shape, dtype=np.uint8) if top <= 0 else np.round(255.0 * proj / top).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return img


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


# --------------------------------------------------------------------------
# configs and manifests


def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seed: int | None = None
    outputs: list[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    format_versions: dict = field(default_factory=lambda: dict(FORMAT_VERSIONS))
    schema_version: int = CONFIG_SCHEMA_VERSION

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config_digest"] = self.config_digest
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = cfg.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
    return cfg


def _primitive(d: dict):
    from .forward import Box, RectPatch, VoxelImport

    d = dict(d)
    kind = d.pop("type", None)
    try:
        if kind == "rect_patch":
            return RectPatch(tuple(d.pop("center")), tuple(d.pop("size")), float(d.pop("z")),
                             **_normal_kw(d))
        if kind == "box":
            return Box(tuple(d.pop("lo")), tuple(d.pop("hi")), **_normal_kw(d))
        if kind == "voxel_import":
            return VoxelImport(np.asarray(d.pop("mask"), dtype=bool), **_normal_kw(d))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad {kind} primitive: {exc}") from exc
    raise ConfigError(f"unknown primitive type {kind!r}")


def _normal_kw(d: dict) -> dict:
    kw = {}
    if "albedo" in d:
        kw["albedo"] = float(d.pop("albedo"))
    if "normal" in d:
        kw["normal"] = tuple(float(a) for a in d.pop("normal"))
    if d:
        raise ConfigError(f"unexpected primitive fields {sorted(d)}")
    return kw


def scene_from_config(cfg: dict, geometry: ScanGeometry):
    """Scene from either ``{"name": ...}`` (bundled suite) or ``{"primitives": [...]}``."""
    from .eval import build_scene
    from .forward import Scene

    spec = cfg.get("scene")
    if not isinstance(spec, dict):
        raise ConfigError("config needs a 'scene' object")
    if "name" in spec:
        try:
            return build_scene(spec["name"], geometry)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    prims = [_primitive(p) for p in spec.get("primitives", [])]
    return Scene(prims, float(spec.get("occluder_threshold", 0.0)))


def geometry_from_config(cfg: dict) -> ScanGeometry:
    g = cfg.get("geometry")
    if not isinstance(g, dict):
        raise ConfigError("config needs a 'geometry' object")
    try:
        return ScanGeometry.from_dict(g)
    except TypeError as exc:
        raise ConfigError(f"bad geometry: {exc}") from exc


# --------------------------------------------------------------------------
# command line

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_FORMAT = 4
EXIT_IO = 5
EXIT_SOLVER = 6

THREADS_ENV = "NLOSFACT_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nlosfact", description="Confocal NLOS simulation and reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="scene config -> transient and ground-truth files")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--photons", type=float, help="Poisson noise, photons at the peak bin")
    s.add_argument("--lambertian", action=argparse.BooleanOptionalAction, default=None)

    s = sub.add_parser("ingest", help="histogram bundle (.npz) -> transient")
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target-bin-width", type=float, default=16e-12)
    s.add_argument("--direct-cut-bins", type=int, default=600)

    s = sub.add_parser("reconstruct", help="transient -> albedo volume")
    s.add_argument("--transient", required=True)
    s.add_argument("--method", required=True, choices=("bp", "fbp", "linear", "factored"))
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="solver config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--outer-iterations", type=int)
    s.add_argument("--inner-iterations", type=int)
    s.add_argument("--iterations", type=int, help="linear solver iterations")
    s.add_argument("--sparsity", type=float)
    s.add_argument("--tv", type=float)
    s.add_argument("--isotropic", action="store_true", help="factored: do not estimate normals")
    s.add_argument("--fbp-quantile", type=float, default=0.0)

    s = sub.add_parser("eval", help="compare a volume against ground truth")
    s.add_argument("--estimate", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--method", default="Lin", help="label for the report row")
    s.add_argument("--report", help="write JSON lines here")

    s = sub.add_parser("render", help="maximum intensity projection -> PGM")
    s.add_argument("--volume", required=True)
    s.add_argument("--axis", choices=("x", "y", "z"), default="z")
    s.add_argument("--out", required=True)

    s = sub.add_parser("bench", help="run the bundled scene suite")
    s.add_argument("--scenes", nargs="+", default=None)
    s.add_argument("--n", type=int, nargs="+", default=[16])
    s.add_argument("--variants", nargs="+", choices=("isotropic", "lambertian"), default=["isotropic"])
    s.add_argument("--methods", nargs="+", default=None)
    s.add_argument("--photons", type=float)
    s.add_argument("--config", help="solver config JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True, help="report path (.jsonl); a .txt table is written alongside")
    return p


def _solver_configs(args):
    from .recon_factored import FactoredSolverConfig
    from .recon_linear import LinearSolverConfig

    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    lin = dict(cfg.get("linear", {}))
    fac = dict(cfg.get("factored", {}))
    for key, flag in (("iterations", "iterations"), ("sparsity_weight", "sparsity"), ("tv_weight", "tv")):
        if getattr(args, flag, None) is not None:
            lin[key] = getattr(args, flag)
    for key, flag in (("outer_iterations", "outer_iterations"),
                      ("albedo_inner_iterations", "inner_iterations"), ("rng_seed", "seed")):
        if getattr(args, flag, None) is not None:
            fac[key] = getattr(args, flag)
    try:
        linear = LinearSolverConfig(**lin)
        fac.pop("linear_config", None)
        factored = FactoredSolverConfig(**fac, linear_config=linear)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad solver config: {exc}") from exc
    return linear, factored


def _cmd_simulate(args, manifest: RunManifest):
    from .forward import FactoredModel, add_poisson_noise, forward_transient, ground_truth_visibility
    from .forward import rasterize_scene

    cfg = load_config(args.config)
    geometry = geometry_from_config(cfg)
    scene = scene_from_config(cfg, geometry)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    photons = args.photons if args.photons is not None else cfg.get("photons_at_peak")
    lambertian = args.lambertian if args.lambertian is not None else bool(cfg.get("lambertian", False))
    rays = int(cfg.get("rays_per_pair", 1))
    manifest.config = {**cfg, "seed": seed, "photons_at_peak": photons, "lambertian": lambertian}
    manifest.seed = seed

    albedo, normals = rasterize_scene(scene, geometry)
    vis = ground_truth_visibility(albedo, geometry, scene.occluder_threshold, rays_per_pair=rays, seed=seed)
    tau = forward_transient(FactoredModel(geometry, vis, normals if lambertian else None), albedo)
    if photons is not None:
        tau = add_poisson_noise(tau, float(photons), seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {"transient.trn": lambda p: write_transient(p, tau),
             "albedo.vol": lambda p: write_volume(p, albedo),
             "visibility.vis": lambda p: write_visibility(p, geometry, vis),
             "normals.vol": lambda p: write_normals(p, geometry, normals)}
    for name, writer in files.items():
        writer(out / name)
        manifest.outputs.append(str(out / name))
    return out / "manifest.json"


def _cmd_ingest(args, manifest: RunManifest):
    bundle = HistogramBundle.load(args.bundle)
    manifest.config = {"bundle": str(args.bundle), "target_bin_width": args.target_bin_width,
                       "direct_cut_bins": args.direct_cut_bins}
    tau = preprocess_histograms(bundle, args.target_bin_width, args.direct_cut_bins)
    flagged = np.argwhere(empty_samples(bundle)).tolist()
    manifest.config["flagged_samples"] = flagged
    write_transient(args.out, tau)
    manifest.outputs.append(str(args.out))
    return Path(str(args.out) + ".manifest.json")


def _cmd_reconstruct(args, manifest: RunManifest):
    from .forward import FactoredModel
    from .recon_factored import als_factorize
    from .recon_linear import admm_linear_solve, backproject, filtered_backproject

    tau = read_transient(args.transient)
    linear, factored = _solver_configs(args)
    if args.isotropic:
        factored = dataclasses.replace(factored, estimate_normals=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.seed = factored.rng_seed
    manifest.config = {"method": args.method, "transient": str(args.transient)}
    if args.method == "bp":
        vol = backproject(tau)
    elif args.method == "fbp":
        manifest.config["fbp_quantile"] = args.fbp_quantile
        vol = filtered_backproject(tau, args.fbp_quantile)
    elif args.method == "linear":
        manifest.config["linear"] = linear.to_dict()
        vol = admm_linear_solve(FactoredModel.unoccluded(tau.geometry), tau, linear)
    else:
        manifest.config["factored"] = factored.to_dict()
        est = als_factorize(tau, tau.geometry, factored)
        vol = est.albedo
        write_visibility(out / "visibility.vis", tau.geometry, est.visibility)
        manifest.outputs.append(str(out / "visibility.vis"))
        normals = est.normals or NormalField.facing(tau.geometry.voxel_grid)
        write_normals(out / "normals.vol", tau.geometry, normals)
        manifest.outputs.append(str(out / "normals.vol"))
        trace = {"objective_trace": est.objective_trace, "diagnostics": est.diagnostics}
        (out / "trace.json").write_text(json.dumps(trace, indent=2) + "\n")
        manifest.outputs.append(str(out / "trace.json"))
    write_volume(out / "albedo.vol", vol)
    manifest.outputs.insert(0, str(out / "albedo.vol"))
    return out / "manifest.json"


def _cmd_eval(args, manifest: RunManifest):
    from .eval import EvalReport, format_table, mse, psnr

    est, truth = read_volume(args.estimate), read_volume(args.truth)
    manifest.config = {"estimate": str(args.estimate), "truth": str(args.truth), "method": args.method}
    report = EvalReport(Path(args.truth).stem, est.geometry.wall_samples_per_axis, "file", None)
    report.mse[args.method] = mse(est, truth)
    report.psnr[args.method] = psnr(est, truth)
    print(format_table([report]))
    if args.report:
        _write_records(args.report, [report])
        manifest.outputs.append(str(args.report))
        return Path(str(args.report) + ".manifest.json")
    return Path(str(args.estimate) + ".eval.manifest.json")


def _write_records(path, reports):
    with open(path, "w") as fh:
        for r in reports:
            for rec in r.records():
                fh.write(json.dumps(rec) + "\n")


def _cmd_render(args, manifest: RunManifest):
    vol = read_volume(args.volume)
    manifest.config = {"volume": str(args.volume), "axis": args.axis}
    render_mip(vol, args.axis, args.out)
    manifest.outputs.append(str(args.out))
    return Path(str(args.out) + ".manifest.json")


def _cmd_bench(args, manifest: RunManifest):
    from .eval import METHOD_LABELS, SCENE_NAMES, BenchmarkConfig, bundled_suite, format_table, run_benchmark

    linear, factored = _solver_configs(args)
    scenes = args.scenes or list(SCENE_NAMES)
    unknown = set(scenes) - set(SCENE_NAMES)
    if unknown:
        raise ConfigError(f"unknown scenes {sorted(unknown)}")
    methods = args.methods or list(METHOD_LABELS)
    if set(methods) - set(METHOD_LABELS):
        raise ConfigError(f"methods must come from {METHOD_LABELS}")
    workers = args.workers or int(os.environ.get(THREADS_ENV, "1") or 1)
    config = BenchmarkConfig(args.photons, linear, factored, workers=workers)
    cases = bundled_suite(args.n, args.variants, scenes)
    manifest.config = {"cases": [dataclasses.asdict(c) for c in cases], "methods": methods,
                       "benchmark": config.to_dict()}
    manifest.seed = args.seed
    reports = run_benchmark(cases, methods, config, args.seed)
    table = format_table(reports)
    print(table)
    _write_records(args.out, reports)
    Path(str(args.out) + ".txt").write_text(table + "\n")
    manifest.outputs += [str(args.out), str(args.out) + ".txt"]
    return Path(str(args.out) + ".manifest.json")


_COMMANDS = {"simulate": _cmd_simulate, "ingest": _cmd_ingest, "reconstruct": _cmd_reconstruct,
             "eval": _cmd_eval, "render": _cmd_render, "bench": _cmd_bench}


def cli_main(argv=None) -> int:
    from .recon_factored import MemoryBudgetError
    from .recon_linear import SolverDivergenceError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"nlosfact: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=["nlosfact"] + argv, config={}, started=_now())
    t0 = time.perf_counter()
    try:
        manifest_path = _COMMANDS[args.command](args, manifest)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except FormatError as exc:
        return _fail(EXIT_FORMAT, exc)
    except (SolverDivergenceError, MemoryBudgetError, FloatingPointError) as exc:
        return _fail(EXIT_SOLVER, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except (GeometryError, ValueError) as exc:
        return _fail(EXIT_CONFIG, exc)
    manifest.finished = _now()
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    try:
        manifest.write(manifest_path)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    return EXIT_OK


def _fail(code: int, exc: Exception) -> int:
    print(f"nlosfact: error: {exc}", file=sys.stderr)
    return code


def main():
    sys.exit(cli_main())
