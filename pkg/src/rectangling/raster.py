"""Image containers, PPM/PGM (and optional PNG) I/O, and bilinear sampling.

Pixel (i, j) sits at continuous coordinate x=i, y=j, so the image domain is
[0, width-1] x [0, height-1].  Samples are float64 in [0, 1]; 8-bit values
only appear at the file boundary.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

POLICIES = ("error", "zero", "clamp")


class ImageFormatError(ValueError):
    """Malformed or unsupported raster file."""


class OutOfBoundsError(ValueError):
    """Bilinear sample requested outside the image with policy='error'."""


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Raster of unit-interval samples, stored as an (height, width, channels) array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("samples must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def from_array(cls, arr, clip: bool = False) -> "ImageBuffer":
        arr = np.asarray(arr, dtype=np.float64)
        if clip:
            arr = np.clip(arr, 0.0, 1.0)
        return cls(arr)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 3) -> "ImageBuffer":
        return cls(np.zeros((height, width, channels)))

    def pixel(self, i: int, j: int) -> np.ndarray:
        """Value at column i, row j."""
        return self.pixels[j, i].copy()

    def luminance(self) -> np.ndarray:
        """(h, w) luma; BT.601 weights for colour images."""
        if self.channels == 1:
            return self.pixels[:, :, 0]
        return self.pixels @ np.array([0.299, 0.587, 0.114])

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class ValidMask:
    """Per-pixel content indicator, (height, width) booleans."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @classmethod
    def full(cls, width: int, height: int, value: bool = True) -> "ValidMask":
        return cls(np.full((height, width), value, dtype=bool))

    def coverage(self) -> float:
        return float(self.bits.mean())

    def matches(self, img: ImageBuffer) -> bool:
        return self.bits.shape == (img.height, img.width)

    def __eq__(self, other):
        if not isinstance(other, ValidMask):
            return NotImplemented
        return bool(np.array_equal(self.bits, other.bits))


# ---------------------------------------------------------------------------
# File I/O


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent if str(path.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse a binary PNM header; returns (magic, width, height, maxval, payload offset)."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after PNM maxval")
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric PNM header field: {exc}") from None
    return magic, width, height, maxval, pos


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 2 or data[:1] != b"P":
        raise ImageFormatError(f"{path}: not a binary PNM file")
    magic, width, height, maxval, offset = _read_header(data)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise ImageFormatError(f"{path}: unsupported PNM variant {magic!r}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported (got {maxval})")
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise ImageFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on environment
        raise ImageFormatError("PNG support requires Pillow") from None
    with Image.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I"):
            arr = np.asarray(im.convert("L"))[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"))
    return arr


def load_image(path) -> ImageBuffer:
    """Load a P6/P5 PPM/PGM (or PNG when Pillow is available)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    if path.suffix.lower() == ".png":
        raw = _read_png(path)
    else:
        raw = _read_pnm(path)
    if raw.shape[2] not in (1, 3):
        raise ImageFormatError(f"{path}: unsupported channel count {raw.shape[2]}")
    return ImageBuffer(raw.astype(np.float64) / 255.0)


def save_image(img: ImageBuffer, path) -> None:
    """Write P6 for colour, P5 for grayscale (PNG if the suffix asks for it)."""
    path = Path(path)
    raw = img.to_uint8()
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover
            raise ImageFormatError("PNG support requires Pillow") from None
        import io

        buf = io.BytesIO()
        Image.fromarray(raw[:, :, 0] if img.channels == 1 else raw).save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
        return
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + raw.tobytes())


def save_mask(mask: ValidMask, path) -> None:
    save_image(ImageBuffer(mask.bits.astype(np.float64)), path)


def load_mask(path) -> ValidMask:
    img = load_image(path)
    return ValidMask(img.luminance() > 0.5)


# ---------------------------------------------------------------------------
# Bilinear sampling


def _check_policy(policy: str) -> None:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")


SNAP_TOL = 1e-9


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) <= SNAP_TOL, r, v)


def sample_array(
    pixels: np.ndarray,
    xs,
    ys,
    policy: str = "zero",
    with_grad: bool = False,
):
    """Vectorised bilinear sampling of an (h, w, c) array.

    Returns ``(values, valid)`` with values shaped (n, c) and ``valid`` true
    where every tap carrying non-zero weight is inside the image.  With
    ``with_grad`` also returns ``(dvdx, dvdy)``, the derivatives of the
    bilinear interpolant (one-sided at tap boundaries).
    """
    _check_policy(policy)
    h, w = pixels.shape[:2]
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    # coordinates within round-off of the lattice are snapped onto it so
    # that e.g. 255 + 1e-13 still counts as the last column
    xs = _snap(xs)
    ys = _snap(ys)
    if policy == "clamp":
        xs_s = np.clip(xs, 0.0, w - 1.0)
        ys_s = np.clip(ys, 0.0, h - 1.0)
    else:
        xs_s, ys_s = xs, ys
    x0 = np.floor(xs_s)
    y0 = np.floor(ys_s)
    fx = xs_s - x0
    fy = ys_s - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    in_x0 = (x0 >= 0) & (x0 < w)
    in_x1 = (x1 >= 0) & (x1 < w)
    in_y0 = (y0 >= 0) & (y0 < h)
    in_y1 = (y1 >= 0) & (y1 < h)
    # taps with zero weight do not count against validity
    ok_x1 = in_x1 | (fx == 0.0)
    ok_y1 = in_y1 | (fy == 0.0)
    valid = in_x0 & in_y0 & ok_x1 & ok_y1
    if policy == "clamp":
        valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    if policy == "error" and not np.all(valid):
        bad = int(np.flatnonzero(~valid)[0])
        raise OutOfBoundsError(f"sample ({xs[bad]}, {ys[bad]}) outside {w}x{h} image")

    cx0 = np.clip(x0, 0, w - 1)
    cx1 = np.clip(x1, 0, w - 1)
    cy0 = np.clip(y0, 0, h - 1)
    cy1 = np.clip(y1, 0, h - 1)
    p00 = pixels[cy0, cx0]
    p01 = pixels[cy0, cx1]
    p10 = pixels[cy1, cx0]
    p11 = pixels[cy1, cx1]
    if policy == "zero":
        p00 = p00 * (in_x0 & in_y0)[:, None]
        p01 = p01 * (in_x1 & in_y0)[:, None]
        p10 = p10 * (in_x0 & in_y1)[:, None]
        p11 = p11 * (in_x1 & in_y1)[:, None]
    fxc = fx[:, None]
    fyc = fy[:, None]
    top = p00 + (p01 - p00) * fxc
    bot = p10 + (p11 - p10) * fxc
    values = top + (bot - top) * fyc
    if not with_grad:
        return values, valid
    dvdx = (p01 - p00) * (1.0 - fyc) + (p11 - p10) * fyc
    dvdy = bot - top
    if policy == "clamp":
        dvdx = dvdx * ((xs > 0) & (xs < w - 1))[:, None]
        dvdy = dvdy * ((ys > 0) & (ys < h - 1))[:, None]
    return values, valid, dvdx, dvdy


def bilinear_sample(img: ImageBuffer, x: float, y: float, policy: str = "error") -> np.ndarray:
    """4-tap bilinear value at (x, y); one entry per channel."""
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    values, _ = sample_array(img.pixels, [x], [y], policy)
    return values[0]


def warp_image(src: ImageBuffer, xs: np.ndarray, ys: np.ndarray, policy: str = "zero",
               src_mask: ValidMask | None = None) -> tuple[ImageBuffer, ValidMask]:
    """Backward warp: output pixel (i, j) takes src at (xs[j, i], ys[j, i])."""
    shape = np.shape(xs)
    values, valid = sample_array(src.pixels, xs, ys, policy)
    if src_mask is not None:
        valid &= sample_mask(src_mask, xs, ys)
    values = np.clip(values, 0.0, 1.0)
    out = ImageBuffer(values.reshape(shape + (src.channels,)))
    return out, ValidMask(valid.reshape(shape))


def sample_mask(mask: ValidMask, xs, ys) -> np.ndarray:
    """True where every non-zero-weight tap lands on a valid mask pixel."""
    bits = mask.bits.astype(np.float64)[:, :, None]
    # a tap with zero weight contributes nothing, so "all taps valid" is
    # equivalent to the zero-filled bilinear mask value reaching 1
    vals, inside = sample_array(bits, xs, ys, "zero")
    return inside & (vals[:, 0] >= 1.0 - 1e-9)
