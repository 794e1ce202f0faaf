import math
from types import SimpleNamespace

import numpy as np
import pytest

from satblock.block_adjust import depth_datum
from satblock.errors import EvaluationError
from satblock.geo_rpc import BiasCorrection, Camera
from satblock.lsm_refine import (
    LsmConfig,
    WeightConfig,
    apply_result,
    refine_track_classic,
)
from satblock.raster import extract_window
from satblock.synth import SceneSpec, render_scene, truth_error
from satblock.tracks import clone_tracks, corrected_point, reproj_stats, triangulate


def test_rendering_is_deterministic():
    spec = SceneSpec(seed=7, grid=96, n_points=10, n_check=3)
    a, b = render_scene(spec), render_scene(spec)
    for i in a.rasters:
        assert np.array_equal(a.rasters[i].data, b.rasters[i].data)
    assert a.biases == b.biases
    assert [(o.x, o.y) for t in a.tracks for o in t.observations] == [
        (o.x, o.y) for t in b.tracks for o in t.observations
    ]


def test_seed_changes_the_scene():
    a = render_scene(SceneSpec(seed=1, grid=96, n_points=5, n_check=0))
    b = render_scene(SceneSpec(seed=2, grid=96, n_points=5, n_check=0))
    assert not np.array_equal(a.rasters[0].data, b.rasters[0].data)


def test_rasters_are_float32_exact(small_scene):
    for r in small_scene.rasters.values():
        assert np.array_equal(r.data, r.data.astype(np.float32).astype(np.float64))


def test_anchor_is_unbiased_and_biases_carry_no_depth_component(small_scene):
    s = small_scene
    assert s.biases[s.anchor] == BiasCorrection(0.0, 0.0)
    d = depth_datum({i: Camera(m) for i, m in s.models.items()}, s.anchor)
    dot = sum(d[i] @ np.array([b.x0, b.y0]) for i, b in s.biases.items())
    scale = math.sqrt(sum(d[i] @ d[i] for i in d))
    assert abs(dot) / scale < 1e-5  # float32-quantized biases
    assert max(abs(v) for b in s.biases.values() for v in (b.x0, b.y0)) <= 2 * s.spec.bias_range


def test_check_tracks_are_exact_under_true_biases(clean_scene):
    cams = clean_scene.cameras()
    for t in clean_scene.check_tracks:
        t = type(t)(t.track_id, t.observations)
        t.ground = triangulate(t, cams)
        assert reproj_stats(t, cams).eps < 1e-4
        g = clean_scene.ground[t.track_id]
        assert abs(t.ground.h - g.h) < 0.05


def test_noise_free_windows_correlate_once_aligned(clean_scene):
    # views differ by rotation and off-nadir shear, so raw windows only
    # correlate moderately; after affine alignment they should be near-identical
    s = clean_scene
    scores, moved = [], []
    for t in clone_tracks(s.perfect_tracks[:15]):
        t.set_reference(0)
        res = refine_track_classic(t, s.rasters, LsmConfig(weights=WeightConfig(w=11)))
        assert res.converged, res.reason
        scores.extend(res.zncc_scores.values())
        apply_result(t, res)
        ref = t.obs(0)
        moved.extend(math.hypot(*np.subtract(corrected_point(o, ref), (o.x, o.y))) for o in t.observations)
    assert np.median(scores) > 0.99
    assert np.median(moved) < 0.1


def test_match_offset_is_a_constant_per_image_shift():
    spec = SceneSpec(seed=4, grid=96, n_points=8, n_check=0, match_noise=0.0, match_offset_px=1.5)
    s = render_scene(spec)
    for i, (ox, oy) in s.match_offsets.items():
        assert math.hypot(ox, oy) == pytest.approx(1.5)
        for t, p in zip(s.tracks, s.perfect_tracks):
            assert t.obs(i).x - p.obs(i).x == pytest.approx(ox, abs=1e-4)
            assert t.obs(i).y - p.obs(i).y == pytest.approx(oy, abs=1e-4)


def _window_sd(scene, w=11):
    sds = []
    for t in scene.perfect_tracks:
        o = t.observations[0]
        sds.append(np.std(extract_window(scene.rasters[o.image_id], (o.x, o.y), w).samples))
    return np.array(sds)


def test_texture_knobs_move_window_contrast():
    base = dict(seed=9, grid=128, n_points=40, n_check=0, image_noise=0.0)
    strong = _window_sd(render_scene(SceneSpec(**base, texture_amplitude=40)))
    faint = _window_sd(render_scene(SceneSpec(**base, texture_amplitude=10)))
    assert np.median(faint) < 0.5 * np.median(strong)
    weak = _window_sd(render_scene(SceneSpec(**base, weak_fraction=0.6)))
    assert np.mean(weak < 0.25 * np.median(strong)) > np.mean(strong < 0.25 * np.median(strong))


@pytest.mark.parametrize(
    "kw",
    [
        {"n_images": 1},
        {"n_images": 9},
        {"grid": 32},
        {"n_points": 0},
        {"bias_range": -1.0},
        {"match_noise": float("nan")},
        {"weak_fraction": 1.0},
        {"gain_range": (0.0, 1.0)},
        {"texture_corr_px": 0.0},
        {"higher_order": 0.1},
    ],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SceneSpec(**kw)


def test_spec_dict_round_trip_and_unknown_keys():
    spec = SceneSpec(seed=3, gain_range=(0.9, 1.1), weak_fraction=0.2)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown"):
        SceneSpec.from_dict({"seed": 1, "colour": "red"})


def test_truth_error_oracle(small_scene):
    s = small_scene
    exact = SimpleNamespace(biases=dict(s.biases), anchor=s.anchor)
    assert truth_error(exact, s) == 0.0
    shifted = {i: BiasCorrection(b.x0 + (0.3 if i != s.anchor else 0.0), b.y0 - (0.4 if i != s.anchor else 0.0))
               for i, b in s.biases.items()}
    assert truth_error(SimpleNamespace(biases=shifted, anchor=s.anchor), s) == pytest.approx(0.5)
    # a common offset applied to every image, anchor included, is invisible
    common = {i: BiasCorrection(b.x0 + 2.0, b.y0 - 1.0) for i, b in s.biases.items()}
    assert truth_error(SimpleNamespace(biases=common, anchor=s.anchor), s) == pytest.approx(0.0, abs=1e-12)


def test_truth_error_rejects_mismatched_anchor_or_images(small_scene):
    s = small_scene
    with pytest.raises(EvaluationError):
        truth_error(SimpleNamespace(biases=dict(s.biases), anchor=1), s)
    partial = {i: b for i, b in s.biases.items() if i != 5}
    with pytest.raises(EvaluationError):
        truth_error(SimpleNamespace(biases=partial, anchor=s.anchor), s)
