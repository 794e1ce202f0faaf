import numpy as np
import pytest

from satblock.block_adjust import (
    GaugeConfig,
    adjusted_cameras,
    adjustment_report,
    build_system,
    default_anchor,
    depth_datum,
    run_bias_adjustment,
    solve_dense,
    solve_schur,
)
from satblock.errors import EmptySystemError
from satblock.geo_rpc import BiasCorrection, CameraSet
from satblock.synth import truth_error
from satblock.tracks import OUTLIER, clone_tracks

from .helpers import camera_set, random_block


@pytest.mark.parametrize("datum", [True, False])
def test_schur_matches_dense(rng, datum):
    for _ in range(10):
        n_img = int(rng.integers(2, 5))
        n_tr = int(rng.integers(3, (50 - 2 * (n_img - 1)) // 3 + 1))
        models, _, tracks = random_block(rng, n_img, n_tr)
        sys = build_system(tracks, camera_set(models), GaugeConfig(anchor=0, depth_datum=datum))
        assert sys.n_cam_unknowns + sys.n_point_unknowns <= 50
        A, _ = sys.dense()
        # without the datum the depth direction is nearly free and both solves
        # lose digits in proportion to the conditioning
        tol = 1e-9 if datum else max(1e-9, 1e-15 * np.linalg.cond(A))
        for damping in (0.0, 1e-3):
            dc_s, dp_s = solve_schur(sys, damping)
            dc_d, dp_d = solve_dense(sys, damping)
            x_s = np.concatenate([dc_s.ravel(), dp_s.ravel()])
            x_d = np.concatenate([dc_d.ravel(), dp_d.ravel()])
            assert np.linalg.norm(x_s - x_d) <= tol * np.linalg.norm(x_d)


def test_constrained_step_is_orthogonal_to_the_datum(rng):
    models, _, tracks = random_block(rng, 4, 12)
    sys = build_system(tracks, camera_set(models), GaugeConfig(anchor=0))
    dc, _ = solve_schur(sys)
    assert abs(float(sys.constraint @ dc.ravel())) < 1e-12 * max(1.0, np.abs(dc).max())
    Z = sys.camera_basis()
    np.testing.assert_allclose(Z.T @ Z, np.eye(Z.shape[1]), atol=1e-12)


def test_depth_datum_is_image_motion_along_the_anchor_ray(models):
    cams = camera_set(models)
    d = depth_datum(cams, 1)
    assert np.all(d[1] == 0)
    rows = np.arange(len(cams.ids))
    _, J = cams.project(rows, np.zeros((len(rows), 3)))
    n = np.linalg.svd(J[cams.index[1]])[2][-1]
    t = 1e-5
    p0 = cams.project(rows, np.tile(-t * n, (len(rows), 1)), jacobian=False)
    p1 = cams.project(rows, np.tile(t * n, (len(rows), 1)), jacobian=False)
    motion = (p1 - p0) / (2 * t)
    # the anchor barely moves; every other image moves by its datum entry
    assert np.linalg.norm(motion[cams.index[1]]) < 1e-3 * np.linalg.norm(motion)
    for i in cams.ids:
        if i != 1:
            np.testing.assert_allclose(d[i], motion[cams.index[i]], rtol=1e-4, atol=1e-6)


def test_noise_free_recovery(clean_scene):
    tracks = clone_tracks(clean_scene.perfect_tracks)
    res = run_bias_adjustment(tracks, CameraSet(clean_scene.cameras(true_bias=False)), GaugeConfig(anchor=0))
    assert res.converged
    assert res.anchor == 0 and res.biases[0] == BiasCorrection(0.0, 0.0)
    assert truth_error(res, clean_scene) < 1e-6
    assert res.internal_rmse < 1e-6


def test_recovery_with_noise(rng):
    models, truth, tracks = random_block(rng, 5, 60, noise=0.5, drop=0.0)
    cams = camera_set(models)
    res = run_bias_adjustment(tracks, cams, GaugeConfig(anchor=0))
    err = [(res.biases[i].x0 - truth[i].x0, res.biases[i].y0 - truth[i].y0) for i in models if i != 0]
    assert np.sqrt(np.mean(np.square(err))) < 0.15


def test_shift_equivariance_without_depth_datum(clean_scene):
    cams = CameraSet(clean_scene.cameras(true_bias=False))
    gauge = GaugeConfig(anchor=0, depth_datum=False)
    base = run_bias_adjustment(clone_tracks(clean_scene.tracks), cams, gauge)
    shifted = clone_tracks(clean_scene.tracks)
    u, v = 2.5, -1.25
    for t in shifted:
        o = t.obs(3)
        o.x += u
        o.y += v
    res = run_bias_adjustment(shifted, cams, gauge)
    assert res.biases[3].x0 == pytest.approx(base.biases[3].x0 - u, abs=1e-5)
    assert res.biases[3].y0 == pytest.approx(base.biases[3].y0 - v, abs=1e-5)
    for i in (1, 2, 4, 5):
        assert res.biases[i].x0 == pytest.approx(base.biases[i].x0, abs=1e-5)


def test_anchor_choice_and_errors(clean_scene):
    tracks = clone_tracks(clean_scene.perfect_tracks[:5])
    assert default_anchor(tracks) == 0
    for t in tracks:
        t.obs(0).status = OUTLIER
    assert default_anchor(tracks) == 1
    cams = CameraSet(clean_scene.cameras(true_bias=False))
    with pytest.raises(ValueError):
        run_bias_adjustment(tracks, cams, GaugeConfig(anchor=42))
    with pytest.raises(EmptySystemError):
        run_bias_adjustment([], cams)


def test_outliers_are_excluded(clean_scene):
    tracks = clone_tracks(clean_scene.perfect_tracks)
    tracks[0].obs(2).x += 50.0
    tracks[0].obs(2).status = OUTLIER
    res = run_bias_adjustment(tracks, CameraSet(clean_scene.cameras(true_bias=False)), GaugeConfig(anchor=0))
    assert truth_error(res, clean_scene) < 1e-6


def test_report_and_adjusted_cameras(clean_scene):
    tracks = clone_tracks(clean_scene.perfect_tracks)
    cams = CameraSet(clean_scene.cameras(true_bias=False))
    res = run_bias_adjustment(tracks, cams, GaugeConfig(anchor=0))
    rep = adjustment_report(res)
    assert sum(rep["eps_histogram"]["counts"]) == len(tracks)
    assert adjusted_cameras(cams, res).biases() == res.biases
