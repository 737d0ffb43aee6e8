import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rectangling.raster import (
    ImageBuffer,
    ImageFormatError,
    OutOfBoundsError,
    ValidMask,
    bilinear_sample,
    load_image,
    load_mask,
    sample_array,
    save_image,
    save_mask,
)

from conftest import random_image


def test_load_p6_all_255(tmp_path):
    p = tmp_path / "white.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes([255] * 12))
    img = load_image(p)
    assert (img.width, img.height, img.channels) == (2, 2, 3)
    assert np.all(img.pixels == 1.0)


def test_load_p6_black_pixel(tmp_path):
    p = tmp_path / "black.ppm"
    p.write_bytes(b"P6 1 1 255\n\x00\x00\x00")
    assert np.all(load_image(p).pixels == 0.0)


def test_load_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    img = load_image(p)
    assert img.channels == 1
    assert img.pixels[0, :, 0].tolist() == [0.0, 1.0]


def test_truncated_payload_is_rejected(tmp_path):
    p = tmp_path / "short.ppm"
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.ppm")


@pytest.mark.parametrize("header", [b"P3\n1 1\n255\n", b"P6\n1 1\n65535\n", b"garbage"])
def test_unsupported_headers(tmp_path, header):
    p = tmp_path / "bad.ppm"
    p.write_bytes(header + bytes(6))
    with pytest.raises(ImageFormatError):
        load_image(p)


def test_round_trip_within_quantization(tmp_path):
    img = random_image((8, 8), seed=3)
    save_image(img, tmp_path / "r.ppm")
    back = load_image(tmp_path / "r.ppm")
    assert np.max(np.abs(back.pixels - img.pixels)) <= 1 / 255 + 1e-12


def test_gray_saves_as_p5(tmp_path):
    img = random_image((5, 4), channels=1, seed=1)
    save_image(img, tmp_path / "g.pgm")
    assert (tmp_path / "g.pgm").read_bytes()[:2] == b"P5"
    assert load_image(tmp_path / "g.pgm").channels == 1


def test_png_round_trip(tmp_path):
    pytest.importorskip("PIL")
    img = random_image((6, 5), seed=2)
    save_image(img, tmp_path / "x.png")
    assert np.max(np.abs(load_image(tmp_path / "x.png").pixels - img.pixels)) <= 1 / 255 + 1e-12


@pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
def test_save_to_read_only_dir(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            save_image(random_image(), d / "x.ppm")
    finally:
        d.chmod(0o700)


def test_save_into_missing_dir_fails(tmp_path):
    with pytest.raises(OSError):
        save_image(random_image(), tmp_path / "missing" / "deeper" / "x.ppm")


def test_mask_round_trip(tmp_path):
    bits = np.random.default_rng(0).random((7, 9)) > 0.5
    save_mask(ValidMask(bits), tmp_path / "m.pgm")
    assert np.array_equal(load_mask(tmp_path / "m.pgm").bits, bits)


def test_buffer_rejects_out_of_range_samples():
    with pytest.raises(ValueError):
        ImageBuffer(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((2, 2, 2)))


def test_sample_integer_coordinate_is_exact():
    img = random_image((6, 6), seed=4)
    assert np.array_equal(bilinear_sample(img, 2.0, 3.0), img.pixel(2, 3))


def test_sample_midpoint():
    img = ImageBuffer(np.array([[[0.0], [1.0]]]))
    assert bilinear_sample(img, 0.5, 0.0)[0] == pytest.approx(0.5)


def test_zero_policy_drops_outside_taps():
    img = ImageBuffer(np.full((2, 2, 1), 0.8))
    assert bilinear_sample(img, -0.5, 0.0, "zero")[0] == pytest.approx(0.4)
    assert bilinear_sample(img, -0.5, 0.0, "clamp")[0] == pytest.approx(0.8)
    with pytest.raises(OutOfBoundsError):
        bilinear_sample(img, -0.5, 0.0, "error")


def test_last_pixel_is_in_bounds():
    img = random_image((4, 3), seed=5)
    assert np.array_equal(bilinear_sample(img, 3.0, 2.0), img.pixel(3, 2))
    _, valid = sample_array(img.pixels, [3.0 + 1e-13], [2.0 - 1e-13])
    assert valid[0]


coords = st.tuples(st.floats(0, 7), st.floats(0, 5))


@given(st.lists(coords, min_size=1, max_size=20), st.floats(0, 1))
def test_constant_image_samples_constant(pts, c):
    img = ImageBuffer(np.full((6, 8, 3), c))
    xs, ys = zip(*pts)
    vals, valid = sample_array(img.pixels, xs, ys, "error")
    assert valid.all()
    assert np.allclose(vals, c, atol=1e-12)


@given(st.integers(0, 7), st.integers(0, 5), st.integers(0, 1000))
def test_lattice_exactness(i, j, seed):
    img = random_image((8, 6), seed=seed)
    assert np.array_equal(bilinear_sample(img, float(i), float(j)), img.pixel(i, j))


@given(st.lists(coords, min_size=1, max_size=10), st.floats(-2, 2), st.floats(-2, 2))
def test_sampling_is_linear_in_pixels(pts, alpha, beta):
    a = random_image((8, 6), seed=1).pixels
    b = random_image((8, 6), seed=2).pixels
    xs, ys = zip(*pts)
    lhs, _ = sample_array(alpha * a + beta * b, xs, ys, "error")
    va, _ = sample_array(a, xs, ys, "error")
    vb, _ = sample_array(b, xs, ys, "error")
    assert np.allclose(lhs, alpha * va + beta * vb, atol=1e-12)


def test_sampling_gradient_matches_finite_difference():
    img = random_image((8, 6), seed=7).pixels
    x, y = np.array([2.3, 4.7]), np.array([1.4, 3.9])
    _, _, dx, dy = sample_array(img, x, y, "zero", with_grad=True)
    h = 1e-6
    fx = (sample_array(img, x + h, y)[0] - sample_array(img, x - h, y)[0]) / (2 * h)
    fy = (sample_array(img, x, y + h)[0] - sample_array(img, x, y - h)[0]) / (2 * h)
    assert np.allclose(dx, fx, atol=1e-6) and np.allclose(dy, fy, atol=1e-6)
