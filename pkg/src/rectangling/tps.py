"""Thin-plate spline solve / evaluate / bending energy / dense warp.

Kernels are centred on the transform's input-domain control points.  The
linear system is solved in coordinates normalised (jointly for input and
output, isotropically) so the source points fill [-1, 1]^2; a TPS is
equivariant under such similarities, so the pixel-unit transform is the
same and the bending quadratic ``sum_c w_c^T K w_c`` is unchanged.

For ``U(r) = r^2 log r^2`` the bending integral over the plane equals
``16 pi`` times that quadratic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .raster import ImageBuffer, ValidMask, sample_array, sample_mask

COND_LIMIT = 1e12
BENDING_INTEGRAL_FACTOR = 16.0 * math.pi
_EVAL_CHUNK = 16384


class DegenerateConfigurationError(ValueError):
    """Control points are collinear, duplicated, or otherwise ill-posed."""


def kernel_u(r):
    """U(r) = r^2 log(r^2), with U(0) = 0."""
    r = np.asarray(r, dtype=np.float64)
    r2 = r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r2 > 0.0, r2 * np.log(np.where(r2 > 0.0, r2, 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def _kernel_from_sq(d2: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0.0, d2 * np.log(np.where(d2 > 0.0, d2, 1.0)), 0.0)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass(frozen=True, eq=False)
class ControlPointSet:
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.source, dtype=np.float64).reshape(-1, 2)
        dst = np.asarray(self.target, dtype=np.float64).reshape(-1, 2)
        if src.shape != dst.shape:
            raise ValueError(f"source/target length mismatch: {len(src)} vs {len(dst)}")
        if len(src) < 3:
            raise DegenerateConfigurationError("need at least 3 control points")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", dst)

    def __len__(self):
        return len(self.source)


def _normalization(points: np.ndarray) -> tuple[np.ndarray, float]:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = 0.5 * float(np.max(hi - lo))
    if not scale > 0:
        raise DegenerateConfigurationError("control points coincide")
    return center, scale


def _system_matrix(xn: np.ndarray, reg: float) -> np.ndarray:
    n = len(xn)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _kernel_from_sq(_pairwise_sq(xn, xn))
    if reg:
        L[:n, :n] += reg * np.eye(n)
    L[:n, n] = 1.0
    L[:n, n + 1 :] = xn
    L[n, :n] = 1.0
    L[n + 1 :, :n] = xn.T
    return L


def _factor(L: np.ndarray):
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise DegenerateConfigurationError(
            f"TPS system is singular or ill-conditioned (cond={cond:.3g})"
        )
    return scipy.linalg.lu_factor(L, check_finite=False)


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Solved thin-plate spline ``q -> A [q; 1] + sum_i w_i U(|c_i - q|)``.

    Parameters are held in normalised units; ``affine`` and ``weights``
    expose the equivalent pixel-unit values.
    """

    centers: np.ndarray
    center: np.ndarray
    scale: float
    affine_n: np.ndarray  # (2, 3) in normalised coordinates, columns x, y, 1
    weights_n: np.ndarray  # (N, 2)
    regularization: float = 0.0

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def weights(self) -> np.ndarray:
        return self.weights_n / self.scale

    @property
    def affine(self) -> np.ndarray:
        s = self.scale
        lin = self.affine_n[:, :2]
        g = np.sum(self.weights_n * np.sum(self.centers**2, axis=1)[:, None], axis=0)
        trans = self.center - lin @ self.center + s * self.affine_n[:, 2] - (math.log(s * s) / s) * g
        return np.column_stack([lin, trans])

    def _normalized_centers(self) -> np.ndarray:
        return (self.centers - self.center) / self.scale

    def __call__(self, pts) -> np.ndarray:
        return evaluate(self, pts)


def solve(cps: ControlPointSet, reg: float = 0.0) -> TpsTransform:
    """Fit the TPS taking ``cps.source`` onto ``cps.target``."""
    if reg < 0:
        raise ValueError("regularization must be non-negative")
    center, scale = _normalization(cps.source)
    xn = (cps.source - center) / scale
    yn = (cps.target - center) / scale
    L = _system_matrix(xn, reg)
    lu = _factor(L)
    n = len(xn)
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = yn
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    w = sol[:n]
    a = sol[n:]  # rows: const, x, y
    affine_n = np.column_stack([a[1], a[2], a[0]])
    return TpsTransform(cps.source.copy(), center, scale, affine_n, w, float(reg))


def identity_transform(points) -> TpsTransform:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return solve(ControlPointSet(pts, pts))


def evaluate(t: TpsTransform, q) -> np.ndarray:
    """Map point(s) ``q`` (shape (2,) or (M, 2)) through the transform."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qs = q.reshape(-1, 2)
    cn = t._normalized_centers()
    out = np.empty_like(qs)
    for start in range(0, len(qs), _EVAL_CHUNK):
        x = (qs[start : start + _EVAL_CHUNK] - t.center) / t.scale
        U = _kernel_from_sq(_pairwise_sq(x, cn))
        fn = x @ t.affine_n[:, :2].T + t.affine_n[:, 2] + U @ t.weights_n
        out[start : start + _EVAL_CHUNK] = t.center + t.scale * fn
    return out[0] if single else out


def bending_energy(t: TpsTransform) -> float:
    """``w_x^T K w_x + w_y^T K w_y``; zero for affine maps."""
    cn = t._normalized_centers()
    K = _kernel_from_sq(_pairwise_sq(cn, cn))
    w = t.weights_n
    return float(max(0.0, np.einsum("ic,ij,jc->", w, K, w)))


def bending_integral(t: TpsTransform) -> float:
    """The plane integral of the squared second derivatives."""
    return BENDING_INTEGRAL_FACTOR * bending_energy(t)


def side_conditions(t: TpsTransform) -> np.ndarray:
    """(3, 2) residuals of sum w, sum w x, sum w y (pixel-unit weights)."""
    w = t.weights
    return np.vstack([w.sum(axis=0), t.centers[:, 0] @ w, t.centers[:, 1] @ w])


class BendingQuadratic:
    """Bending energy as a quadratic form in the targets of fixed centres.

    ``energy(Y) = sum_c Y[:, c]^T B Y[:, c]`` with pixel-unit targets ``Y``.
    """

    def __init__(self, centers, reg: float = 0.0):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        center, scale = _normalization(centers)
        xn = (centers - center) / scale
        L = _system_matrix(xn, reg)
        lu = _factor(L)
        n = len(xn)
        eye = np.zeros((n + 3, n))
        eye[:n] = np.eye(n)
        M = scipy.linalg.lu_solve(lu, eye, check_finite=False)[:n]
        K = _kernel_from_sq(_pairwise_sq(xn, xn))
        B = M.T @ K @ M / (scale * scale)
        self.matrix = 0.5 * (B + B.T)
        self.centers = centers

    def energy(self, targets) -> float:
        Y = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        return float(max(0.0, np.einsum("ic,ij,jc->", Y, self.matrix, Y)))

    def gradient(self, targets) -> np.ndarray:
        Y = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
        return 2.0 * self.matrix @ Y


def dense_warp(
    src: ImageBuffer,
    t_out_to_src: TpsTransform,
    out_size: tuple[int, int],
    policy: str = "zero",
    src_mask: ValidMask | None = None,
) -> tuple[ImageBuffer, ValidMask]:
    """Backward warp: each output pixel samples ``src`` at ``t(pixel)``."""
    w, h = out_size
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    mapped = evaluate(t_out_to_src, np.column_stack([xs.ravel(), ys.ravel()]))
    vals, valid = sample_array(src.pixels, mapped[:, 0], mapped[:, 1], policy)
    if src_mask is not None:
        valid &= sample_mask(src_mask, mapped[:, 0], mapped[:, 1])
    vals = np.clip(vals, 0.0, 1.0).reshape(h, w, src.channels)
    return ImageBuffer(vals), ValidMask(valid.reshape(h, w))
