import hypothesis
import numpy as np
import pytest

from nlosfact.core import NormalField, ScanGeometry, VisibilityField
from nlosfact.forward import FactoredModel

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def tiny_geometry():
    return ScanGeometry.desk(4, bins_per_voxel=2)


def random_instance(geometry, rng, isotropic=False, occupancy=1.0):
    """Random albedo, visibility and wall-facing normals for small operator tests."""
    rho = rng.uniform(0.0, 1.0, geometry.voxel_grid)
    if occupancy < 1.0:
        rho *= rng.uniform(size=rho.shape) < occupancy
    vis = VisibilityField(rng.uniform(0.0, 1.0, (geometry.n_samples, geometry.n_voxels)))
    normals = None
    if not isotropic:
        normals = NormalField(rng.uniform(0, 2 * np.pi, geometry.voxel_grid),
                              rng.uniform(np.pi / 2, np.pi, geometry.voxel_grid))
    return rho, FactoredModel(geometry, vis, normals)


def residual_extended(tau, rho_flat, angles_u, angles_v, vis, tbl):
    """Data residual evaluated in extended precision, for finite-difference oracles.

    ``angles_u``/``angles_v`` are flat per-voxel arrays (``None`` for the
    isotropic model) and ``vis`` is the (S, J) visibility; all may be
    perturbed long doubles. Central differences of the float64 objective lose
    small gradient components to roundoff; this keeps them resolvable at h=1e-6.
    """
    ld = np.longdouble
    shade = ld(1)
    if angles_u is not None:
        u, v = np.asarray(angles_u, ld), np.asarray(angles_v, ld)
        n = np.stack([np.cos(u) * np.sin(v), np.sin(u) * np.sin(v), np.cos(v)], axis=-1)
        shade = np.maximum(np.einsum("sjk,jk->sj", tbl.direction.astype(ld), n), ld(0))
    flux = (tbl.attenuation.astype(ld) * shade * np.asarray(vis, ld) * np.asarray(rho_flat, ld)[None, :]).ravel()
    pred = np.zeros(tbl.n_rows + 1, ld)
    rows = tbl.row_lo.ravel()
    np.add.at(pred, rows, flux * tbl.w_lo.ravel().astype(ld))
    np.add.at(pred, rows + 1, flux * tbl.w_hi.ravel().astype(ld))
    return np.asarray(tau, ld).ravel() - pred[: tbl.n_rows]


def central_difference(r_plus, r_minus, h):
    """(||r+||^2 - ||r-||^2) / 2h, written as (r+ - r-).(r+ + r-) to avoid cancellation."""
    return float(np.dot(r_plus - r_minus, r_plus + r_minus) / (2 * np.longdouble(h)))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance check; printed in the terminal summary."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {label}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
