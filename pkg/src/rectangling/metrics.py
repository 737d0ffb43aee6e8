"""Image, mesh and flow error metrics; flow colour rendering; evaluation reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .flow import FlowField
from .mesh import MeshGrid
from .raster import ImageBuffer, ValidMask

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"image shapes differ: {a.pixels.shape} vs {b.pixels.shape}")


def _mask_bits(mask: ValidMask | None, shape) -> np.ndarray | None:
    if mask is None:
        return None
    if mask.bits.shape != shape:
        raise ValueError("mask size does not match the images")
    if not mask.bits.any():
        raise ValueError("mask selects no pixels")
    return mask.bits


def mse(a: ImageBuffer, b: ImageBuffer, mask: ValidMask | None = None) -> float:
    _check_same(a, b)
    diff = (a.pixels - b.pixels) ** 2
    bits = _mask_bits(mask, a.pixels.shape[:2])
    if bits is not None:
        diff = diff[bits]
    return float(diff.mean())


def psnr(a: ImageBuffer, b: ImageBuffer, mask: ValidMask | None = None) -> float:
    """10 log10(1 / MSE) on unit-range samples; ``math.inf`` for identical inputs."""
    err = mse(a, b, mask)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gray(img: ImageBuffer) -> np.ndarray:
    return img.pixels[:, :, 0] if img.channels == 1 else img.luminance()


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1."""
    truncate = SSIM_RADIUS / SSIM_SIGMA

    def filt(v):
        return scipy.ndimage.gaussian_filter(v, SSIM_SIGMA, mode="reflect", truncate=truncate)

    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(a: ImageBuffer, b: ImageBuffer, mask: ValidMask | None = None) -> float:
    """Mean local SSIM of the luminance planes.

    Window positions within 5 px of the border are excluded; with a mask,
    only positions whose centre pixel is valid are averaged.
    """
    _check_same(a, b)
    if a.pixels is b.pixels or np.array_equal(a.pixels, b.pixels):
        return 1.0
    m = ssim_map(_gray(a), _gray(b))
    r = SSIM_RADIUS
    keep = np.zeros(m.shape, dtype=bool)
    keep[r : m.shape[0] - r, r : m.shape[1] - r] = True
    if not keep.any():
        keep[:] = True
    bits = _mask_bits(mask, m.shape)
    if bits is not None:
        keep &= bits
        if not keep.any():
            raise ValueError("mask selects no SSIM window positions")
    return float(np.clip(m[keep].mean(), -1.0, 1.0))


def mesh_rmse(pred: MeshGrid, gt: MeshGrid) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"mesh shapes differ: {pred.shape} vs {gt.shape}")
    d = pred.points - gt.points
    return float(math.sqrt(np.mean(np.sum(d * d, axis=1))))


def flow_epe(pred: FlowField, gt: FlowField, mask: ValidMask | None = None) -> float:
    """Mean endpoint error over pixels where both flows are defined (and the mask is set)."""
    if pred.vectors.shape != gt.vectors.shape:
        raise ValueError("flow sizes differ")
    err = np.linalg.norm(pred.vectors - gt.vectors, axis=2)
    keep = pred.defined() & gt.defined()
    bits = _mask_bits(mask, keep.shape)
    if bits is not None:
        keep &= bits
    if not keep.any():
        raise ValueError("no pixels to compare")
    return float(err[keep].mean())


# ---------------------------------------------------------------------------
# Flow colour wheel


def color_wheel() -> np.ndarray:
    """(55, 3) Middlebury wheel: red-yellow-green-cyan-blue-magenta, in [0, 1]."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col : col + RY, 0] = 1
    wheel[col : col + RY, 1] = np.arange(RY) / RY
    col += RY
    wheel[col : col + YG, 0] = 1 - np.arange(YG) / YG
    wheel[col : col + YG, 1] = 1
    col += YG
    wheel[col : col + GC, 1] = 1
    wheel[col : col + GC, 2] = np.arange(GC) / GC
    col += GC
    wheel[col : col + CB, 1] = 1 - np.arange(CB) / CB
    wheel[col : col + CB, 2] = 1
    col += CB
    wheel[col : col + BM, 2] = 1
    wheel[col : col + BM, 0] = np.arange(BM) / BM
    col += BM
    wheel[col : col + MR, 2] = 1 - np.arange(MR) / MR
    wheel[col : col + MR, 0] = 1
    return wheel


def flow_to_color(flow: FlowField, max_norm: float | None = None) -> ImageBuffer:
    """Hue from direction (angle 0 = red), saturation from magnitude / max_norm.

    Zero flow renders white; undefined vectors render black.
    """
    u = flow.u.copy()
    v = flow.v.copy()
    defined = flow.defined()
    u[~defined] = 0.0
    v[~defined] = 0.0
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag.max()) if mag.size else 0.0
    if max_norm <= 0:
        sat = np.zeros_like(mag)
    else:
        sat = np.clip(mag / max_norm, 0.0, 1.0)
    wheel = color_wheel()
    n = len(wheel)
    angle = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi) * n
    k0 = np.floor(angle).astype(np.int64) % n
    k1 = (k0 + 1) % n
    f = (angle - np.floor(angle))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    rgb = 1.0 - sat[..., None] * (1.0 - col)
    rgb[~defined] = 0.0
    return ImageBuffer(np.clip(rgb, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Reports


def _json_number(v):
    if v is None:
        return None
    return v if math.isfinite(v) else ("Infinity" if v > 0 else "-Infinity")


@dataclass
class EvalItem:
    name: str
    psnr: float | None = None
    ssim: float | None = None
    mesh_rmse: float | None = None
    epe: float | None = None


METRIC_FIELDS = ("psnr", "ssim", "mesh_rmse", "epe")


@dataclass
class EvalReport:
    items: list[EvalItem] = field(default_factory=list)

    def add(self, item: EvalItem) -> None:
        self.items.append(item)

    def means(self) -> dict:
        out = {}
        for name in METRIC_FIELDS:
            vals = [getattr(it, name) for it in self.items if getattr(it, name) is not None]
            out[name] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "items": [
                {"name": it.name, **{k: _json_number(getattr(it, k)) for k in METRIC_FIELDS}}
                for it in self.items
            ],
            "mean": {k: _json_number(v) for k, v in self.means().items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self) -> str:
        cols = [c for c in METRIC_FIELDS if any(getattr(it, c) is not None for it in self.items)]
        rows = [["item", *cols]]

        def fmt(v):
            if v is None:
                return "-"
            if math.isinf(v):
                return "inf"
            return f"{v:.4f}"

        for it in self.items:
            rows.append([it.name, *(fmt(getattr(it, c)) for c in cols)])
        means = self.means()
        rows.append(["mean", *(fmt(means[c]) for c in cols)])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = []
        for r in rows:
            cells = [r[0].ljust(widths[0])] + [r[i].rjust(widths[i]) for i in range(1, len(r))]
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"
