"""Odd-polynomial radial camera model: fisheye synthesis and rectification.

The profile is ``r(t) = k1 t + k2 t^3 + k3 t^5 + ...``.  In ``pixel_radius``
mode the argument ``t`` is the rectified offset length in pixels; in
``angle`` mode it is the incidence angle ``atan(|offset| / focal)``.  In both
modes ``r`` is a distorted-image radius in pixels.

A rectified pixel at offset ``p`` from the principal point reads the distorted
image at ``principal + r(t) * p / |p|``.  Profiles with ``r(t) > t`` shrink
the content toward the principal point and leave blank corners.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowField
from .raster import ImageBuffer, ValidMask, sample_array, sample_mask

RADIAL_MODES = ("angle", "pixel_radius")

BISECT_TOL = 1e-9
BISECT_MAX_ITER = 200

# Published synthesis ranges (magnitudes); k2..k4 may take either sign.
PUBLISHED_RANGES = {
    "k1": (1e-8, 1e-4),
    "k2": (1e-12, 1e-8),
    "k3": (1e-16, 1e-12),
    "k4": (1e-20, 1e-16),
}


class NonMonotoneProfileError(ValueError):
    """Radial profile is not strictly increasing over its working range."""


class RadialRangeError(ValueError):
    """Requested radius lies outside the profile's achievable range."""


@dataclass(frozen=True)
class DistortionParams:
    """Coefficients of the radial profile plus camera geometry.

    ``extent`` is the largest offset (px) from the principal point the
    model has to handle; by default the distance to the farthest corner of
    an image centred on ``principal``.
    """

    k: tuple[float, ...]
    principal: tuple[float, float]
    focal: float = 128.0
    radial_mode: str = "pixel_radius"
    extent: float | None = None
    _t_max: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = tuple(float(c) for c in self.k)
        if not k or not all(math.isfinite(c) for c in k):
            raise ValueError("k must be a non-empty tuple of finite coefficients")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "principal", (float(self.principal[0]), float(self.principal[1])))
        if self.radial_mode not in RADIAL_MODES:
            raise ValueError(f"radial_mode must be one of {RADIAL_MODES}")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        extent = self.extent
        if extent is None:
            u0, v0 = self.principal
            extent = math.hypot(u0 + 0.5, v0 + 0.5)
        if not extent > 0:
            raise ValueError("extent must be positive")
        object.__setattr__(self, "extent", float(extent))
        if self.radial_mode == "pixel_radius":
            t_max = self.extent
        else:
            t_max = math.pi / 2 * (1.0 - 1e-9)
        object.__setattr__(self, "_t_max", t_max)
        _check_monotone(k, t_max)

    @classmethod
    def centered(cls, k, size: tuple[int, int], focal: float = 128.0,
                 radial_mode: str = "pixel_radius") -> "DistortionParams":
        w, h = size
        u0, v0 = (w - 1) / 2.0, (h - 1) / 2.0
        return cls(tuple(k), (u0, v0), focal, radial_mode, _corner_extent((u0, v0), size))

    @property
    def t_max(self) -> float:
        return self._t_max

    @property
    def r_max(self) -> float:
        return float(radial_profile(self, self._t_max))

    def is_identity(self) -> bool:
        return self.radial_mode == "pixel_radius" and self.k[0] == 1.0 and not any(self.k[1:])


def _corner_extent(principal, size) -> float:
    w, h = size
    u0, v0 = principal
    corners = [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)]
    return max(math.hypot(x - u0, y - v0) for x, y in corners)


def published_coefficients(k1: float, k2: float, k3: float, k4: float) -> tuple[float, ...]:
    """Pixel-radius profile for a draw from the published ranges.

    Adds the unit linear term and negates the draw so that the published
    (negative) k1 shrinks rectified content: ``r(t) = t - k1 t^3 - k2 t^5 - ...``.
    """
    return (1.0, -k1, -k2, -k3, -k4)


def _poly_eval(k, t):
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    acc = np.zeros_like(t)
    for c in reversed(k):
        acc = acc * t2 + c
    return acc * t


def _poly_deriv(k, t):
    t = np.asarray(t, dtype=np.float64)
    t2 = t * t
    acc = np.zeros_like(t)
    for i in reversed(range(len(k))):
        acc = acc * t2 + (2 * i + 1) * k[i]
    return acc


def _check_monotone(k, t_max: float) -> None:
    ts = np.linspace(0.0, t_max, 4097)
    d = _poly_deriv(k, ts)
    if np.any(d <= 0.0):
        raise NonMonotoneProfileError(
            f"profile {k} not strictly increasing on [0, {t_max:.6g}]"
        )
    # derivative is a polynomial in t^2; look for sign changes between samples
    coeffs = [(2 * i + 1) * k[i] for i in range(len(k))]
    roots = np.roots(coeffs[::-1]) if len(coeffs) > 1 else np.array([])
    for z in roots:
        if abs(z.imag) < 1e-12 * max(1.0, abs(z)) and 0.0 < z.real <= t_max * t_max:
            raise NonMonotoneProfileError(
                f"profile {k} has a stationary point at t={math.sqrt(z.real):.6g}"
            )


def radial_profile(params: DistortionParams, t):
    """k1 t + k2 t^3 + k3 t^5 + ... (scalar or array)."""
    out = _poly_eval(params.k, t)
    return float(out) if np.ndim(out) == 0 else out


def radial_profile_derivative(params: DistortionParams, t):
    out = _poly_deriv(params.k, t)
    return float(out) if np.ndim(out) == 0 else out


def _bisect(params: DistortionParams, targets: np.ndarray) -> np.ndarray:
    lo = np.zeros_like(targets)
    hi = np.full_like(targets, params.t_max)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        below = _poly_eval(params.k, mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= BISECT_TOL * 1e-3 * np.maximum(1.0, hi)):
            break
    return 0.5 * (lo + hi)


def invert_radial_array(params: DistortionParams, r_target) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised inverse; returns (t, ok) with NaN where out of range."""
    r = np.asarray(r_target, dtype=np.float64)
    ok = (r >= 0.0) & (r <= params.r_max)
    t = _bisect(params, np.where(ok, r, 0.0))
    return np.where(ok, t, np.nan), ok


def invert_radial(params: DistortionParams, r_target: float) -> float:
    """Radial argument t with radial_profile(t) == r_target (bracketed bisection)."""
    if not r_target >= 0.0:
        raise RadialRangeError(f"target radius {r_target} must be non-negative")
    if r_target > params.r_max:
        raise RadialRangeError(
            f"target radius {r_target} exceeds profile maximum {params.r_max:.6g}"
        )
    t, _ = invert_radial_array(params, [r_target])
    return float(t[0])


# ---------------------------------------------------------------------------
# Point maps


def _radial_argument(params: DistortionParams, rho):
    if params.radial_mode == "pixel_radius":
        return rho
    return np.arctan(rho / params.focal)


def rectify_offsets(params: DistortionParams, dx, dy) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised rectify_point; returns distorted-image coordinates."""
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    rho = np.hypot(dx, dy)
    r = _poly_eval(params.k, _radial_argument(params, rho))
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0, r / np.where(rho > 0, rho, 1.0), 0.0)
    # at the origin the map is continuous with value = principal
    u0, v0 = params.principal
    return u0 + dx * scale, v0 + dy * scale


def rectify_point(params: DistortionParams, offset) -> tuple[float, float]:
    """Distorted-image location read by the rectified pixel at ``offset`` from the principal point."""
    x, y = rectify_offsets(params, offset[0], offset[1])
    return float(x), float(y)


def unrectify_offsets(params: DistortionParams, dx, dy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse map: distorted offsets -> rectified offsets.

    Returns (rx, ry, ok); ``ok`` is false where the distorted radius is out
    of the profile's range (outside the field of view).
    """
    dx = np.asarray(dx, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    rho = np.hypot(dx, dy)
    t, ok = invert_radial_array(params, rho)
    if params.radial_mode == "pixel_radius":
        rad = t
    else:
        rad = params.focal * np.tan(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(rho > 0, rad / np.where(rho > 0, rho, 1.0), 1.0)
    scale = np.where(ok, scale, np.nan)
    return dx * scale, dy * scale, ok


def _pixel_grid(size):
    w, h = size
    return np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))


def _out_principal(params: DistortionParams, in_size, out_size):
    u0, v0 = params.principal
    return (u0 + (out_size[0] - in_size[0]) / 2.0, v0 + (out_size[1] - in_size[1]) / 2.0)


# ---------------------------------------------------------------------------
# Image operations


def rectify_image(
    distorted: ImageBuffer,
    params: DistortionParams,
    out_size: tuple[int, int] | None = None,
    src_mask: ValidMask | None = None,
) -> tuple[ImageBuffer, ValidMask]:
    """Backward-map every output pixel through rectify_point and sample bilinearly."""
    in_size = (distorted.width, distorted.height)
    out_size = tuple(out_size) if out_size is not None else in_size
    cu, cv = _out_principal(params, in_size, out_size)
    xs, ys = _pixel_grid(out_size)
    sx, sy = rectify_offsets(params, xs - cu, ys - cv)
    vals, valid = sample_array(distorted.pixels, sx, sy, "zero")
    if src_mask is not None:
        valid &= sample_mask(src_mask, sx, sy)
    w, h = out_size
    vals = np.where(valid[:, None], vals, 0.0)
    return (
        ImageBuffer(np.clip(vals, 0.0, 1.0).reshape(h, w, distorted.channels)),
        ValidMask(valid.reshape(h, w)),
    )


def synthesize_with_mask(source: ImageBuffer, params: DistortionParams) -> tuple[ImageBuffer, ValidMask]:
    """Wide-angle rendering of ``source`` plus its field-of-view mask."""
    xs, ys = _pixel_grid((source.width, source.height))
    u0, v0 = params.principal
    rx, ry, ok = unrectify_offsets(params, xs - u0, ys - v0)
    sx = np.where(ok, u0 + rx, -1e6)
    sy = np.where(ok, v0 + ry, -1e6)
    vals, valid = sample_array(source.pixels, sx, sy, "zero")
    valid &= ok.ravel()
    vals = np.where(valid[:, None], vals, 0.0)
    shape = (source.height, source.width)
    return (
        ImageBuffer(np.clip(vals, 0.0, 1.0).reshape(shape + (source.channels,))),
        ValidMask(valid.reshape(shape)),
    )


def synthesize_distorted(source: ImageBuffer, params: DistortionParams) -> ImageBuffer:
    """Render the wide-angle image; out-of-FoV pixels are black."""
    return synthesize_with_mask(source, params)[0]


def rectification_flow(params: DistortionParams, size: tuple[int, int]) -> FlowField:
    """Displacement (rectified position - distorted position) for every distorted pixel."""
    xs, ys = _pixel_grid(size)
    u0, v0 = params.principal
    dx, dy = xs - u0, ys - v0
    rx, ry, ok = unrectify_offsets(params, dx, dy)
    u = np.where(ok, rx - dx, np.nan)
    v = np.where(ok, ry - dy, np.nan)
    return FlowField(np.stack([u, v], axis=-1))
