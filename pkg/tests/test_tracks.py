import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satblock.errors import (
    DegenerateGeometryError,
    SceneFormatError,
    SelectionError,
    UnderdeterminedError,
)
from satblock.geo_rpc import CameraSet
from satblock.raster import ImageRaster
from satblock.tracks import (
    ACTIVE,
    DIVERGED,
    OUTLIER,
    REMOVED,
    Observation,
    Track,
    clone_tracks,
    corrected_point,
    count_status,
    filter_outliers,
    read_tracks,
    reproj_stats,
    rmse_eps,
    select_reference,
    triangulate,
    write_tracks,
)


def _true_cams(scene):
    return CameraSet(scene.cameras(true_bias=True))


def test_neutral_parameters_leave_points_unchanged():
    t = Track(1, [Observation(0, 10.0, 20.0), Observation(1, 13.5, 18.25)])
    t.set_reference(0)
    for o in t.observations:
        assert corrected_point(o, t.reference_observation()) == pytest.approx((o.x, o.y))


def test_affine_correction_hand_example():
    ref = Observation(0, 10.0, 20.0)
    o = Observation(1, 5.0, 6.0, a0=1.0, a1=0.1, a2=0.2, b0=-2.0, b1=0.05, b2=0.3)
    x, y = corrected_point(o, ref)
    # dx = 1 + 0.1 * 10 + 0.2 * 20 = 6; dy = -2 + 0.05 * 20 + 0.3 * 10 = 2
    assert (x, y) == pytest.approx((11.0, 8.0))
    assert corrected_point(ref, ref) == (10.0, 20.0)


def test_track_rejects_repeated_images():
    with pytest.raises(ValueError):
        Track(0, [Observation(1, 0, 0), Observation(1, 2, 2)])


def test_rmse_eps_hand_value():
    assert rmse_eps([[3.0, 4.0], [0.0, 0.0]]) == pytest.approx(math.sqrt(25 / 0.5))
    with pytest.raises(UnderdeterminedError):
        rmse_eps([[1.0, 1.0]])


def test_triangulation_recovers_truth(clean_scene):
    cams = _true_cams(clean_scene)
    for t in clone_tracks(clean_scene.perfect_tracks[:10]):
        g = triangulate(t, cams)
        truth = clean_scene.ground[t.track_id]
        assert abs(g.lat - truth.lat) < 1e-9 and abs(g.lon - truth.lon) < 1e-9
        assert abs(g.h - truth.h) < 1e-4
        t.ground = g
        assert reproj_stats(t, cams).eps < 1e-6


def test_reprojection_residual_sign(clean_scene):
    cams = _true_cams(clean_scene)
    t = clone_tracks(clean_scene.perfect_tracks[:1])[0]
    t.ground = clean_scene.ground[t.track_id]
    t.observations[0].x += 1.5
    st_ = reproj_stats(t, cams)
    assert st_.residuals[0, 0] == pytest.approx(1.5, abs=1e-6)
    assert st_.n == len(t.observations)


def test_triangulation_needs_two_distinct_rays(clean_scene):
    t = clone_tracks(clean_scene.perfect_tracks[:1])[0]
    for o in t.observations[1:]:
        o.status = OUTLIER
    with pytest.raises(UnderdeterminedError):
        triangulate(t, _true_cams(clean_scene))
    # two images sharing one model have parallel rays
    m = clean_scene.models[0]
    from satblock.geo_rpc import Camera

    cams = CameraSet({0: Camera(m), 1: Camera(m)})
    p = t.observations[0]
    twin = Track(9, [Observation(0, p.x, p.y), Observation(1, p.x, p.y)])
    with pytest.raises(DegenerateGeometryError):
        triangulate(twin, cams)


def test_filter_flags_the_perturbed_view(clean_scene):
    cams = _true_cams(clean_scene)
    tracks = clone_tracks(clean_scene.perfect_tracks[:5])
    tracks[2].obs(3).x += 8.0
    flagged = filter_outliers(tracks, cams, 2.0)
    assert flagged == 1
    assert tracks[2].obs(3).status == OUTLIER
    assert all(o.status == ACTIVE for t in tracks for o in t.observations if o is not tracks[2].obs(3))
    with pytest.raises(ValueError):
        filter_outliers(tracks, cams, 0.0)


def test_filter_removes_tracks_left_with_one_view(clean_scene):
    cams = _true_cams(clean_scene)
    t = clone_tracks(clean_scene.perfect_tracks[:1])[0]
    for o in t.observations[2:]:
        o.status = OUTLIER
    t.observations[1].x += 30.0
    t.observations[1].y -= 30.0
    filter_outliers([t], cams, 2.0)
    assert t.status == REMOVED


def test_reference_selection_prefers_correlated_windows(rng):
    base = rng.normal(100, 20, (40, 40))
    rasters = {0: ImageRaster(0, base), 1: ImageRaster(1, base * 1.5 + 3), 2: ImageRaster(2, rng.normal(100, 20, (40, 40)))}
    t = Track(0, [Observation(i, 20.0, 20.0) for i in range(3)])
    # 0 and 1 correlate perfectly and tie; the lower id wins
    assert select_reference(t, rasters, 7) == 0
    flat = {i: ImageRaster(i, np.full((40, 40), 5.0)) for i in range(3)}
    with pytest.raises(SelectionError):
        select_reference(t, flat, 7)
    edge = Track(1, [Observation(i, 1.0, 1.0) for i in range(3)])
    with pytest.raises(SelectionError):
        select_reference(edge, rasters, 7)


coords = st.floats(-1e4, 1e4, allow_nan=False).map(lambda v: float(f"{v:.12g}"))


@given(st.lists(st.tuples(coords, coords), min_size=2, max_size=6))
def test_tracks_jsonl_round_trip(tmp_path_factory, pts):
    path = tmp_path_factory.mktemp("t") / "tracks.jsonl"
    tracks = [Track(k, [Observation(i, x, y) for i, (x, y) in enumerate(pts)]) for k in range(3)]
    tracks.append(Track("s-1", [Observation(i, x, y) for i, (x, y) in enumerate(pts)]))
    write_tracks(path, tracks)
    back = read_tracks(path)
    assert [t.track_id for t in back] == [t.track_id for t in tracks]
    for a, b in zip(tracks, back):
        assert [(o.image_id, o.x, o.y) for o in a.observations] == [(o.image_id, o.x, o.y) for o in b.observations]
    write_tracks(path.with_suffix(".2"), back)
    assert path.read_bytes() == path.with_suffix(".2").read_bytes()


def test_track_parse_errors_name_the_line(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"id": 1, "observations": [{"image": 0, "x": 1, "y": 2}, {"image": 1, "x": 1, "y": 2}]}\n{"id": 2}\n')
    with pytest.raises(SceneFormatError) as err:
        read_tracks(path)
    assert err.value.line == 2
    path.write_text('{"id": 1, "observations": [{"image": 0, "x": 1, "y": 2}]}\n')
    with pytest.raises(SceneFormatError):
        read_tracks(path)


def test_count_status():
    ts = [Track(i, [Observation(0, 0, 0), Observation(1, 0, 0)]) for i in range(4)]
    ts[1].status = DIVERGED
    ts[3].status = REMOVED
    assert count_status(ts) == {ACTIVE: 2, DIVERGED: 1, REMOVED: 1}
