import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nlosfact.core import AlbedoVolume, ScanGeometry, VisibilityField
from nlosfact.eval import (
    METHOD_LABELS,
    OCCLUDED_SCENES,
    SCENE_NAMES,
    BenchmarkCase,
    BenchmarkConfig,
    EvalReport,
    build_scene,
    bundled_suite,
    fit_scale,
    format_table,
    mse,
    psnr,
    reference_solution,
    run_benchmark,
    simulate_case,
)
from nlosfact.forward import FactoredModel, forward_transient, ground_truth_visibility, rasterize_scene
from nlosfact.recon_linear import LinearSolverConfig, admm_linear_solve

from conftest import random_instance

volumes = arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1))


def test_psnr_exact_match_is_infinite():
    t = np.random.default_rng(0).uniform(size=(4, 4, 4))
    assert psnr(t, t) == math.inf


def test_psnr_twenty_db():
    truth = np.zeros((10, 10, 10))
    truth[0, 0, 0] = 1.0
    est = truth + 0.1  # MSE 0.01 everywhere
    assert psnr(est, truth) == pytest.approx(20.0, abs=1e-12)
    assert mse(est, truth) == pytest.approx(0.01, rel=1e-12)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2, 2)), np.ones((2, 2, 3)))
    with pytest.raises(ValueError):
        psnr(np.ones((2, 2, 2)), np.zeros((2, 2, 2)))


@given(volumes, volumes, st.floats(1e-3, 1e3))
def test_psnr_scale_invariance(est, truth, s):
    truth = truth.copy()
    truth[0, 0, 0] = 1.0
    a = psnr(est, truth)
    b = psnr(s * est, s * truth)
    if math.isinf(a):
        assert math.isinf(b)
    else:
        assert b == pytest.approx(a, abs=1e-9)


def test_psnr_accepts_volumes(tiny_geometry):
    t = AlbedoVolume(tiny_geometry, np.ones(tiny_geometry.voxel_grid))
    e = AlbedoVolume(tiny_geometry, np.full(tiny_geometry.voxel_grid, 0.9))
    assert psnr(e, t) == pytest.approx(20.0)


def test_reference_with_unit_visibility_is_plain_linear(tiny_geometry):
    rng = np.random.default_rng(1)
    rho, model = random_instance(tiny_geometry, rng, occupancy=0.5)
    tau = forward_transient(model, AlbedoVolume(tiny_geometry, rho))
    cfg = LinearSolverConfig(iterations=30)
    ref = reference_solution(tau, tiny_geometry, VisibilityField.ones(tiny_geometry), None, cfg)
    lin = admm_linear_solve(FactoredModel.unoccluded(tiny_geometry), tau, cfg)
    np.testing.assert_array_equal(ref.data, lin.data)


def test_reference_rejects_mismatched_visibility(tiny_geometry):
    other = ScanGeometry.desk(3)
    with pytest.raises(ValueError):
        reference_solution(None, tiny_geometry, VisibilityField.ones(other))


def test_fit_scale_recovers_gain(tiny_geometry):
    rng = np.random.default_rng(2)
    rho = AlbedoVolume(tiny_geometry, rng.uniform(size=tiny_geometry.voxel_grid))
    tau = forward_transient(FactoredModel.unoccluded(tiny_geometry), rho)
    scaled = fit_scale(tau, AlbedoVolume(tiny_geometry, 123.0 * rho.data))
    np.testing.assert_allclose(scaled.data, rho.data, rtol=1e-12)


@pytest.mark.parametrize("name", SCENE_NAMES)
def test_bundled_scenes_rasterize(name):
    g = ScanGeometry.desk(16)
    rho, normals = rasterize_scene(build_scene(name, g), g)
    assert rho.data.max() > 0
    occ = rho.flat > 0
    # every bundled surface faces the wall
    assert np.all(normals.vectors[occ, 2] < 0)


@pytest.mark.parametrize("name", OCCLUDED_SCENES)
def test_occluded_scenes_are_occluded(name):
    g = ScanGeometry.desk(8)
    rho, _ = rasterize_scene(build_scene(name, g), g)
    assert ground_truth_visibility(rho, g).data[:, rho.flat > 0].min() < 1.0


def test_single_plane_is_unoccluded():
    g = ScanGeometry.desk(8)
    rho, _ = rasterize_scene(build_scene("single_plane", g), g)
    assert ground_truth_visibility(rho, g).data.min() == 1.0


def test_unknown_scene():
    with pytest.raises(KeyError):
        build_scene("teapot", ScanGeometry.desk(4))


def test_bundled_suite_cross_product():
    suite = bundled_suite()
    assert len(suite) == 2 * 2 * len(SCENE_NAMES)
    assert {c.variant for c in suite} == {"isotropic", "lambertian"}


def test_empty_method_list_gives_empty_report():
    assert run_benchmark(["two_planes"], []) == []


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        run_benchmark(["two_planes"], ["Magic"])


def test_report_labels_validated():
    with pytest.raises(ValueError):
        EvalReport("s", 4, "isotropic", None, psnr={"Magic": 1.0})


def test_report_records_and_table():
    # isotropic Bunny row, used only to exercise formatting
    vals = dict(zip(METHOD_LABELS[:5], (15.8, 13.3, 26.6, 40.8, 46.1)))
    rep = EvalReport("bunny", 64, "isotropic", None, psnr=vals)
    rows = rep.records()
    assert [r["method"] for r in rows] == list(METHOD_LABELS[:5])
    assert all(r["psnr_peak"] == "max(truth)" for r in rows)
    table = format_table([rep])
    for v in ("15.80", "13.30", "26.60", "40.80", "46.10"):
        assert v in table
    inf = EvalReport("x", 4, "isotropic", None, psnr={"Lin": math.inf})
    assert inf.records()[0]["psnr_infinite"] and inf.records()[0]["psnr_db"] is None
    assert "inf" in format_table([inf])


def test_method_failure_is_recorded_not_raised():
    # isotropic scenes have no normals, so the N+V reference is skipped rather than failing
    cfg = BenchmarkConfig(linear=LinearSolverConfig(iterations=5))
    reps = run_benchmark([BenchmarkCase("two_planes", n=4)], ["BP", "Lin w/ N+V"], cfg)
    assert "BP" in reps[0].psnr and "Lin w/ N+V" not in reps[0].psnr


def test_benchmark_deterministic_and_worker_independent():
    cases = [BenchmarkCase("two_planes", n=4), BenchmarkCase("single_plane", n=4)]
    cfg = BenchmarkConfig(photons_at_peak=1e4, linear=LinearSolverConfig(iterations=10))
    a = run_benchmark(cases, ["FBP", "Lin"], cfg, seed=3)
    b = run_benchmark(cases, ["FBP", "Lin"], cfg, seed=3)
    assert [r.psnr for r in a] == [r.psnr for r in b]
    par = BenchmarkConfig(photons_at_peak=1e4, linear=LinearSolverConfig(iterations=10), workers=2)
    c = run_benchmark(cases, ["FBP", "Lin"], par, seed=3)
    assert [r.psnr for r in a] == [r.psnr for r in c]


def test_simulate_case_noise_changes_transient():
    clean = simulate_case(BenchmarkCase("two_planes", n=4))
    noisy = simulate_case(BenchmarkCase("two_planes", n=4), photons_at_peak=1e3, seed=1)
    assert not np.array_equal(clean["tau"].data, noisy["tau"].data)
    assert clean["normals"] is None
    assert simulate_case(BenchmarkCase("two_planes", n=4, lambertian=True))["normals"] is not None


@pytest.mark.slow
def test_two_plane_ordering():
    cfg = BenchmarkConfig()
    (rep,) = run_benchmark(["two_planes"], ["BP", "Lin", "Factored", "Lin w/ V"], cfg)
    p = rep.psnr
    assert p["Lin w/ V"] >= p["Factored"] > p["Lin"] > p["BP"]
