import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rectangling import distortion as dist
from rectangling.metrics import psnr
from rectangling.raster import ValidMask

from conftest import smooth_image

P = (128.0, 128.0)


def params(k, principal=P, mode="pixel_radius", **kw):
    return dist.DistortionParams(tuple(k), principal, radial_mode=mode, **kw)


def test_identity_profile():
    assert dist.radial_profile(params((1, 0, 0, 0)), 0.25) == 0.25


def test_polynomial_value():
    # 0.2 + 0.5 * 0.008
    assert dist.radial_profile(params((1, 0.5, 0, 0)), 0.2) == pytest.approx(0.204, abs=1e-15)


@pytest.mark.parametrize("k", [(1, 0, 0, 0), (1, 0.5, 0, 0), (0.9, 1e-6, 2e-12, 0)])
def test_profile_at_zero(k):
    assert dist.radial_profile(params(k), 0.0) == 0.0


def test_invert_identity():
    assert dist.invert_radial(params((1, 0, 0, 0)), 0.7) == pytest.approx(0.7, abs=1e-9)


def test_invert_cubic():
    assert dist.invert_radial(params((1, 0.5, 0, 0)), 0.204) == pytest.approx(0.2, abs=1e-9)


def test_invert_out_of_range():
    p = params((1, 0, 0, 0))
    with pytest.raises(dist.RadialRangeError):
        dist.invert_radial(p, p.r_max * 1.01)
    with pytest.raises(dist.RadialRangeError):
        dist.invert_radial(p, -1.0)


def test_non_monotone_rejected():
    with pytest.raises(dist.NonMonotoneProfileError):
        params((1, -1e-4, 0, 0))


def test_focal_must_be_positive():
    with pytest.raises(ValueError):
        dist.DistortionParams((1.0,), P, focal=0.0)


def test_rectify_point_origin():
    assert dist.rectify_point(params((0.9, 1e-6)), (0.0, 0.0)) == P


def test_rectify_point_identity_profile():
    assert dist.rectify_point(params((1, 0, 0, 0)), (10.0, 0.0)) == (138.0, 128.0)


def test_rectify_point_hand_value():
    p = params((0.9, -1e-6, 0, 0))
    r = 0.9 * 100 - 1e-6 * 100**3
    assert dist.rectify_point(p, (100.0, 0.0)) == pytest.approx((128 + r, 128.0), abs=1e-12)
    assert r == pytest.approx(dist.radial_profile(p, 100.0))


def test_angle_mode_uses_incidence_angle():
    p = params((100.0,), mode="angle", focal=100.0)
    # theta = atan(100/100) = pi/4, r = 100 * pi/4
    x, y = dist.rectify_point(p, (0.0, 100.0))
    assert x == pytest.approx(128.0) and y == pytest.approx(128.0 + 25 * math.pi)


@given(st.floats(0, 170), st.floats(0, 2 * math.pi), st.floats(-math.pi, math.pi))
def test_rectify_point_radially_symmetric(rad, ang, rot):
    p = params(dist.published_coefficients(-2e-6, 1e-11, 0, 0))
    off = np.array([rad * math.cos(ang), rad * math.sin(ang)])
    R = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    a = np.subtract(dist.rectify_point(p, off), P)
    b = np.subtract(dist.rectify_point(p, R @ off), P)
    assert np.allclose(R @ a, b, atol=1e-9)


@given(st.floats(0, 180))
def test_invert_after_forward(t):
    p = params(dist.published_coefficients(-3e-6, -2e-11, 1e-15, 0))
    assert dist.invert_radial(p, dist.radial_profile(p, t)) == pytest.approx(t, abs=1e-9)


def test_published_coefficients_shrink():
    p = dist.DistortionParams.centered(dist.published_coefficients(-1e-5, 0, 0, 0), (256, 256))
    ts = np.linspace(1, p.t_max, 50)
    assert np.all(dist.radial_profile(p, ts) > ts)


def test_rectify_identity_passthrough():
    img = smooth_image((40, 30))
    out, mask = dist.rectify_image(img, dist.DistortionParams.centered((1, 0, 0, 0), (40, 30)))
    assert np.allclose(out.pixels, img.pixels, atol=1e-12)
    assert mask.bits.all()


def test_rectify_shrinking_masks_corners():
    img = smooth_image((256, 256))
    p = dist.DistortionParams.centered(dist.published_coefficients(-1e-5, 0, 0, 0), (256, 256))
    _, mask = dist.rectify_image(img, p)
    # a corner pixel reads the source at radius r(t) > t, beyond the frame
    corner = dist.rectify_point(p, (-127.5, -127.5))
    assert corner[0] < 0 and corner[1] < 0
    assert not mask.bits[:8, :8].any() and not mask.bits[-8:, -8:].any()
    assert mask.bits[100:156, 100:156].all()
    assert mask.coverage() < 1.0


def test_rectify_out_size():
    img = smooth_image((40, 30))
    out, mask = dist.rectify_image(img, dist.DistortionParams.centered((1,), (40, 30)), (50, 20))
    assert (out.width, out.height) == (50, 20)
    assert mask.bits.shape == (20, 50)


def test_synthesize_identity():
    img = smooth_image((40, 30))
    out = dist.synthesize_distorted(img, dist.DistortionParams.centered((1, 0, 0, 0), (40, 30)))
    assert np.allclose(out.pixels, img.pixels, atol=1e-12)


@pytest.mark.parametrize("draw", [(-1e-6, 0, 0, 0), (-5e-6, 5e-11, -1e-15, 0)])
def test_synthesize_then_rectify_round_trip(draw):
    img = smooth_image((256, 256), sigma=3.0, seed=9)
    p = dist.DistortionParams.centered(dist.published_coefficients(*draw), (256, 256))
    wide, wide_mask = dist.synthesize_with_mask(img, p)
    back, mask = dist.rectify_image(wide, p, src_mask=wide_mask)
    assert psnr(back, img, mask) >= 35.0


def test_barrel_bows_lines_away_from_center():
    # a vertical source line x = 128 + 80 maps, in the wide-angle image, to a
    # curve whose ends are pulled toward the centre more than its middle
    p = dist.DistortionParams.centered(dist.published_coefficients(-1e-5, 0, 0, 0), (256, 256))
    c = np.array(p.principal)
    xs = []
    for dy in (-100.0, 0.0, 100.0):
        d = np.array([80.0, dy])
        r = np.linalg.norm(d)
        # wide-angle location of a source point at offset d: radius r(|d|)^-1 applied backwards
        rho = dist.invert_radial(p, r) if r <= p.r_max else None
        xs.append(c[0] + d[0] * rho / r)
    assert xs[1] > xs[0] and xs[1] > xs[2]


def test_rectification_flow_identity():
    f = dist.rectification_flow(dist.DistortionParams.centered((1, 0, 0, 0), (20, 10)), (20, 10))
    assert np.allclose(f.vectors, 0.0, atol=1e-9)


def test_rectification_flow_symmetry_and_direction():
    size = (64, 64)
    p = dist.DistortionParams.centered(dist.published_coefficients(-2e-5, 0, 0, 0), size)
    f = dist.rectification_flow(p, size)
    c = np.array(p.principal)
    # pixels at equal radius: (c + (a, b)) under the 8 symmetries of the square
    a, b = 20.5, 7.5
    pts = [(a, b), (-a, b), (a, -b), (-a, -b), (b, a), (-b, a), (b, -a), (-b, -a)]
    mags = [f.magnitude()[int(c[1] + dy), int(c[0] + dx)] for dx, dy in pts]
    assert max(mags) - min(mags) < 1e-6
    ys, xs = np.mgrid[: size[1], : size[0]]
    radial = np.stack([xs - c[0], ys - c[1]], axis=-1)
    dot = np.sum(radial * f.vectors, axis=-1)
    ok = f.defined() & (np.linalg.norm(radial, axis=-1) > 1)
    # rectified position is nearer the centre than the distorted one
    assert np.all(dot[ok] < 0)


def test_published_range_masks_are_not_rectangular():
    from rectangling.curriculum import DistortionRanges, draw_distortion, item_rng

    img = smooth_image((256, 256))
    for i in range(5):
        p, _, _ = draw_distortion((256, 256), DistortionRanges(), item_rng(2, i))
        _, mask = dist.rectify_image(img, p)
        assert isinstance(mask, ValidMask)
        assert not mask.bits[0, 0] and not mask.bits[-1, -1]
        assert mask.coverage() < 1.0
