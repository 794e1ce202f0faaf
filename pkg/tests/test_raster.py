import importlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from satblock import _pykernels
from satblock.errors import SamplingError, SceneFormatError, UndefinedCorrelationError
from satblock.geo_rpc import ImagePoint
from satblock.raster import (
    ImageRaster,
    MatchWindow,
    extract_window,
    gradient_at,
    read_f32,
    read_pgm,
    read_raster,
    sample_bilinear,
    window_offsets,
    window_stats,
    write_f32,
    write_pgm,
    zncc,
    zncc_samples,
)

try:
    _ck = importlib.import_module("satblock._ckernels")
except ImportError:  # pragma: no cover
    _ck = None


def _plane(a=3.0, b=0.7, c=-1.3, shape=(40, 50)):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    return ImageRaster(0, a + b * xx + c * yy)


def _smooth(shape=(64, 64)):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    return ImageRaster(0, 100 + 20 * np.sin(0.3 * xx + 0.1 * yy) + 15 * np.cos(0.17 * yy - 0.05 * xx))


@given(x=st.floats(0, 49), y=st.floats(0, 39))
def test_bilinear_is_exact_on_planes(x, y):
    r = _plane()
    assert sample_bilinear(r, ImagePoint(x, y)) == pytest.approx(3.0 + 0.7 * x - 1.3 * y, abs=1e-9)


def test_integer_coordinates_hit_pixel_centres(rng):
    data = rng.normal(size=(10, 12))
    r = ImageRaster(0, data)
    assert sample_bilinear(r, ImagePoint(4, 7)) == data[7, 4]
    # the far edge is reached with a unit fraction, exact up to one rounding
    assert sample_bilinear(r, ImagePoint(11, 9)) == pytest.approx(data[9, 11], rel=1e-15)


def test_out_of_bounds_sampling():
    r = _plane()
    with pytest.raises(SamplingError):
        sample_bilinear(r, ImagePoint(-0.01, 3))
    with pytest.raises(SamplingError):
        sample_bilinear(r, ImagePoint(3, 39.5))
    with pytest.raises(SamplingError):
        extract_window(r, ImagePoint(2, 20), 7)
    assert _pykernels.sample_points(r.data, np.array([60.0]), np.array([1.0])) is None


def test_gradient_of_plane():
    gx, gy = gradient_at(_plane(), ImagePoint(10.3, 20.6))
    assert gx == pytest.approx(0.7)
    assert gy == pytest.approx(-1.3)


def test_analytic_sample_gradient_matches_finite_difference(rng):
    r = _smooth()
    xs = rng.uniform(5, 58, 200)
    ys = rng.uniform(5, 58, 200)
    _, gx, gy = _pykernels.sample_points_grad(r.data, xs, ys)
    h = 1e-3
    fdx = (_pykernels.sample_points(r.data, xs + h, ys) - _pykernels.sample_points(r.data, xs - h, ys)) / (2 * h)
    fdy = (_pykernels.sample_points(r.data, xs, ys + h) - _pykernels.sample_points(r.data, xs, ys - h)) / (2 * h)
    # bilinear partials are discontinuous across cell edges; compare away from them
    inner = (np.abs(xs - np.round(xs)) > 2 * h) & (np.abs(ys - np.round(ys)) > 2 * h)
    scale = np.max(np.abs(fdx))
    np.testing.assert_allclose(gx[inner], fdx[inner], atol=5e-2 * scale)
    np.testing.assert_allclose(gy[inner], fdy[inner], atol=5e-2 * scale)


def test_window_offsets_row_major():
    dx, dy = window_offsets(3)
    assert list(dx) == [-1, 0, 1, -1, 0, 1, -1, 0, 1]
    assert list(dy) == [-1, -1, -1, 0, 0, 0, 1, 1, 1]
    with pytest.raises(ValueError):
        extract_window(_plane(), ImagePoint(20, 20), 4)


def test_window_extraction_matches_pointwise_sampling():
    r = _smooth()
    win = extract_window(r, ImagePoint(30.25, 20.5), 5)
    assert win.samples.shape == (5, 5)
    assert win.samples[0, 4] == pytest.approx(sample_bilinear(r, ImagePoint(32.25, 18.5)))


windows = st.lists(st.floats(-100, 100), min_size=25, max_size=25).filter(lambda v: np.std(v) > 1e-3)


@given(a=windows, b=windows, gain=st.floats(0.01, 50), offset=st.floats(-500, 500))
def test_zncc_properties(a, b, gain, offset):
    a, b = np.array(a), np.array(b)
    s = zncc_samples(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(zncc_samples(b, a), abs=1e-12)
    assert zncc_samples(gain * a + offset, b) == pytest.approx(s, abs=1e-10)
    assert zncc_samples(a, a) == pytest.approx(1.0, abs=1e-12)
    assert zncc_samples(a, -a) == pytest.approx(-1.0, abs=1e-12)


def test_zncc_undefined_on_constant_windows():
    flat = MatchWindow(ImagePoint(0, 0), 3, np.full((3, 3), 7.0))
    other = MatchWindow(ImagePoint(0, 0), 3, np.arange(9.0))
    with pytest.raises(UndefinedCorrelationError):
        zncc(flat, other)
    with pytest.raises(UndefinedCorrelationError):
        window_stats(np.full(9, 3.0))
    with pytest.raises(ValueError):
        zncc(other, MatchWindow(ImagePoint(0, 0), 5, np.arange(25.0)))


def test_raster_validation():
    with pytest.raises(ValueError):
        ImageRaster(0, np.zeros(5))
    with pytest.raises(ValueError):
        ImageRaster(0, np.array([[1.0, np.nan]]))
    r = ImageRaster(0, np.ones((2, 3)))
    assert (r.width, r.height) == (3, 2)
    with pytest.raises(ValueError):
        r.data[0, 0] = 5.0


def test_f32_round_trip(tmp_path, rng):
    data = rng.normal(100, 20, (17, 23)).astype(np.float32).astype(float)
    write_f32(tmp_path / "a.f32", ImageRaster(0, data))
    back = read_raster(tmp_path / "a.f32", 4)
    assert back.image_id == 4
    np.testing.assert_array_equal(back.data, data)
    (tmp_path / "bad.f32").write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(SceneFormatError):
        read_f32(tmp_path / "bad.f32")


@pytest.mark.parametrize("bits", [8, 16])
def test_pgm_round_trip(tmp_path, rng, bits):
    top = 255 if bits == 8 else 65535
    data = rng.integers(0, top + 1, (9, 14)).astype(float)
    write_pgm(tmp_path / "a.pgm", ImageRaster(0, data), bits=bits)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm").data, data)


def test_pgm_with_comment_and_bad_magic(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm").data, [[1.0, 2.0]])
    (tmp_path / "d.pgm").write_bytes(b"P2\n2 1\n255\n1 2")
    with pytest.raises(SceneFormatError):
        read_pgm(tmp_path / "d.pgm")
    with pytest.raises(SceneFormatError):
        read_raster(tmp_path / "x.tif")


@pytest.mark.skipif(_ck is None, reason="compiled kernels not built")
def test_backends_agree(rng):
    img = _smooth().data
    xs = rng.uniform(3, 60, 300)
    ys = rng.uniform(3, 60, 300)
    np.testing.assert_allclose(_ck.sample_points(img, xs, ys), _pykernels.sample_points(img, xs, ys), rtol=0, atol=1e-12)
    for a, b in zip(_ck.sample_points_grad(img, xs, ys), _pykernels.sample_points_grad(img, xs, ys)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    assert _ck.sample_points(img, np.array([70.0]), np.array([3.0])) is None
    dx, dy = window_offsets(9)
    ref = rng.normal(size=dx.size)
    params = np.array([0.4, 1.02, -0.03, -0.2, 0.97, 0.01, 0.1, 0.9])
    out_c = _ck.lsm_accumulate(img, 100.0, 0.05, 30.2, 31.7, params, dx, dy, ref)
    out_p = _pykernels.lsm_accumulate(img, 100.0, 0.05, 30.2, 31.7, params, dx, dy, ref)
    for a, b in zip(out_c, out_p):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    assert _ck.lsm_accumulate(img, 0.0, 1.0, 2.0, 2.0, params, dx, dy, ref) is None
