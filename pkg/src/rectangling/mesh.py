"""Control-point meshes: regular grids, co-linearity loss, foldovers, mesh warps, JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

from .raster import ImageBuffer, ValidMask, atomic_write_bytes, sample_array, sample_mask
from .tps import ControlPointSet


class MeshFormatError(ValueError):
    pass


class DegenerateMeshError(ValueError):
    """A mesh edge has zero length."""


@dataclass(frozen=True, eq=False)
class MeshGrid:
    """rows x cols control points, row-major (x, y)."""

    rows: int
    cols: int
    points: np.ndarray

    def __post_init__(self):
        rows, cols = int(self.rows), int(self.cols)
        if rows < 2 or cols < 2:
            raise ValueError(f"mesh needs at least 2x2 nodes, got {rows}x{cols}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size != rows * cols * 2:
            raise MeshFormatError(f"{rows}x{cols} mesh needs {rows * cols} points, got {pts.size // 2}")
        pts = pts.reshape(rows * cols, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("mesh coordinates must be finite")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "points", pts)

    @property
    def grid(self) -> np.ndarray:
        """(rows, cols, 2) view of the points."""
        return self.points.reshape(self.rows, self.cols, 2)

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def node(self, r: int, c: int) -> np.ndarray:
        return self.grid[r, c].copy()

    def with_points(self, points) -> "MeshGrid":
        return MeshGrid(self.rows, self.cols, np.asarray(points, dtype=np.float64).reshape(-1, 2))

    def translated(self, dx: float, dy: float) -> "MeshGrid":
        return self.with_points(self.points + np.array([dx, dy]))

    def __eq__(self, other):
        if not isinstance(other, MeshGrid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.points, other.points))


def regular_grid(U: int, V: int, w: float, h: float) -> MeshGrid:
    """(U+1) rows by (V+1) cols evenly spanning [0, w-1] x [0, h-1]."""
    if U < 1 or V < 1:
        raise ValueError("U and V must be >= 1")
    xs = np.linspace(0.0, w - 1.0, V + 1)
    ys = np.linspace(0.0, h - 1.0, U + 1)
    gx, gy = np.meshgrid(xs, ys)
    return MeshGrid(U + 1, V + 1, np.column_stack([gx.ravel(), gy.ravel()]))


def is_regular(mesh: MeshGrid, tol: float = 1e-9) -> bool:
    g = mesh.grid
    xs = g[0, :, 0]
    ys = g[:, 0, 1]
    return (
        bool(np.all(np.abs(g[:, :, 0] - xs[None, :]) <= tol))
        and bool(np.all(np.abs(g[:, :, 1] - ys[:, None]) <= tol))
        and bool(np.all(np.diff(xs) > 0))
        and bool(np.all(np.diff(ys) > 0))
    )


# ---------------------------------------------------------------------------
# Inter-grid co-linearity


def _edge_pairs(g: np.ndarray):
    """Successive edge pairs along rows and along columns, as (p0, p1, p2) arrays."""
    rows = (g[:, :-2], g[:, 1:-1], g[:, 2:])
    cols = (g[:-2, :], g[1:-1, :], g[2:, :])
    return rows, cols


def tuple_count(rows: int, cols: int) -> int:
    return rows * (cols - 2) + cols * (rows - 2)


def _pair_terms(p0, p1, p2, with_grad: bool):
    e1 = p1 - p0
    e2 = p2 - p1
    n1 = np.linalg.norm(e1, axis=-1)
    n2 = np.linalg.norm(e2, axis=-1)
    if np.any(n1 == 0.0) or np.any(n2 == 0.0):
        raise DegenerateMeshError("mesh has a zero-length edge")
    cos = np.clip(np.sum(e1 * e2, axis=-1) / (n1 * n2), -1.0, 1.0)
    if not with_grad:
        return 1.0 - cos, None
    inv = 1.0 / (n1 * n2)
    dcos_de1 = e2 * inv[..., None] - (cos / (n1 * n1))[..., None] * e1
    dcos_de2 = e1 * inv[..., None] - (cos / (n2 * n2))[..., None] * e2
    # loss = 1 - cos; e1 = p1 - p0, e2 = p2 - p1
    g0 = dcos_de1
    g1 = -dcos_de1 + dcos_de2
    g2 = -dcos_de2
    return 1.0 - cos, (g0, g1, g2)


def intergrid_loss(mesh: MeshGrid) -> float:
    """Mean (1 - cos) over successive row-wise and column-wise edge pairs."""
    value, _ = intergrid_loss_and_grad(mesh.grid, with_grad=False)
    return value


def intergrid_loss_and_grad(g: np.ndarray, with_grad: bool = True):
    """Loss and (rows, cols, 2) gradient for a node array ``g``."""
    g = np.asarray(g, dtype=np.float64)
    rows, cols = g.shape[:2]
    m = tuple_count(rows, cols)
    if m == 0:
        return 0.0, (np.zeros_like(g) if with_grad else None)
    total = 0.0
    grad = np.zeros_like(g) if with_grad else None
    (r0, r1, r2), (c0, c1, c2) = _edge_pairs(g)
    if cols > 2:
        terms, parts = _pair_terms(r0, r1, r2, with_grad)
        total += float(terms.sum())
        if with_grad:
            grad[:, :-2] += parts[0]
            grad[:, 1:-1] += parts[1]
            grad[:, 2:] += parts[2]
    if rows > 2:
        terms, parts = _pair_terms(c0, c1, c2, with_grad)
        total += float(terms.sum())
        if with_grad:
            grad[:-2, :] += parts[0]
            grad[1:-1, :] += parts[1]
            grad[2:, :] += parts[2]
    value = total / m
    if with_grad:
        grad /= m
    return value, grad


# ---------------------------------------------------------------------------
# Foldovers


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def folded_quads(mesh: MeshGrid) -> np.ndarray:
    """(rows-1, cols-1) booleans: quad has a corner triangle with non-positive area."""
    g = mesh.grid
    a = g[:-1, :-1]
    b = g[:-1, 1:]
    c = g[1:, 1:]
    d = g[1:, :-1]
    # corner triangles walking a -> b -> c -> d; positive for the regular grid (y down)
    tri = np.stack(
        [
            _cross(b - a, c - b),
            _cross(c - b, d - c),
            _cross(d - c, a - d),
            _cross(a - d, b - a),
        ]
    )
    return np.any(tri <= 0.0, axis=0)


def foldover_count(mesh: MeshGrid) -> int:
    return int(folded_quads(mesh).sum())


# ---------------------------------------------------------------------------
# Mesh pairs and warping


def mesh_pair_to_control_points(src: MeshGrid, dst: MeshGrid) -> ControlPointSet:
    if src.shape != dst.shape:
        raise ValueError(f"mesh shapes differ: {src.shape} vs {dst.shape}")
    return ControlPointSet(src.points.copy(), dst.points.copy())


class MeshInterpolator:
    """Bilinear-in-cell weights of probe points w.r.t. a rectilinear dst mesh.

    ``matrix`` is a sparse (P, N) operator: ``matrix @ src_points`` gives
    the source location of every probe.
    """

    def __init__(self, dst: MeshGrid, px, py):
        if not is_regular(dst):
            raise ValueError("dst mesh must be an axis-aligned rectilinear grid")
        g = dst.grid
        xs = g[0, :, 0]
        ys = g[:, 0, 1]
        px = np.asarray(px, dtype=np.float64).ravel()
        py = np.asarray(py, dtype=np.float64).ravel()
        ci = np.clip(np.searchsorted(xs, px, side="right") - 1, 0, dst.cols - 2)
        ri = np.clip(np.searchsorted(ys, py, side="right") - 1, 0, dst.rows - 2)
        a = (px - xs[ci]) / (xs[ci + 1] - xs[ci])
        b = (py - ys[ri]) / (ys[ri + 1] - ys[ri])
        n00 = ri * dst.cols + ci
        idx = np.stack([n00, n00 + 1, n00 + dst.cols, n00 + dst.cols + 1], axis=1)
        wts = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
        p = len(px)
        rows = np.repeat(np.arange(p), 4)
        self.matrix = scipy.sparse.csr_matrix(
            (wts.ravel(), (rows, idx.ravel())), shape=(p, dst.n)
        )
        self.matrix_t = self.matrix.T.tocsr()
        self.shape = (dst.rows, dst.cols)
        self.n_probes = p

    def map(self, src_points: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(src_points, dtype=np.float64).reshape(-1, 2)

    def pullback(self, grad_locations: np.ndarray) -> np.ndarray:
        """Chain a (P, 2) gradient w.r.t. probe locations back to the nodes."""
        return self.matrix_t @ grad_locations


def pixel_interpolator(dst: MeshGrid, out_size: tuple[int, int], step: int = 1) -> MeshInterpolator:
    w, h = out_size
    xs, ys = np.meshgrid(np.arange(0, w, step, dtype=np.float64), np.arange(0, h, step, dtype=np.float64))
    return MeshInterpolator(dst, xs, ys)


def warp_by_mesh(
    src: ImageBuffer,
    src_mesh: MeshGrid,
    dst_mesh: MeshGrid,
    policy: str = "zero",
    out_size: tuple[int, int] | None = None,
    src_mask: ValidMask | None = None,
) -> tuple[ImageBuffer, ValidMask]:
    """Piecewise-bilinear backward warp from the src quad mesh onto the regular dst mesh."""
    if src_mesh.shape != dst_mesh.shape:
        raise ValueError(f"mesh shapes differ: {src_mesh.shape} vs {dst_mesh.shape}")
    if out_size is None:
        g = dst_mesh.grid
        out_size = (int(round(g[0, -1, 0] - g[0, 0, 0])) + 1, int(round(g[-1, 0, 1] - g[0, 0, 1])) + 1)
    w, h = out_size
    interp = pixel_interpolator(dst_mesh, out_size)
    loc = interp.map(src_mesh.points)
    vals, valid = sample_array(src.pixels, loc[:, 0], loc[:, 1], policy)
    if src_mask is not None:
        valid &= sample_mask(src_mask, loc[:, 0], loc[:, 1])
    vals = np.clip(vals, 0.0, 1.0).reshape(h, w, src.channels)
    return ImageBuffer(vals), ValidMask(valid.reshape(h, w))


# ---------------------------------------------------------------------------
# JSON I/O


def mesh_to_dict(mesh: MeshGrid) -> dict:
    return {
        "rows": mesh.rows,
        "cols": mesh.cols,
        "points": [[float(x), float(y)] for x, y in mesh.points],
    }


def mesh_from_dict(d: dict) -> MeshGrid:
    try:
        rows = int(d["rows"])
        cols = int(d["cols"])
        pts = np.asarray(d["points"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshFormatError(f"malformed mesh object: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MeshFormatError("points must be a list of [x, y] pairs")
    if len(pts) != rows * cols:
        raise MeshFormatError(f"rows*cols = {rows * cols} but {len(pts)} points given")
    return MeshGrid(rows, cols, pts)


def write_mesh(mesh: MeshGrid, path) -> None:
    text = json.dumps(mesh_to_dict(mesh), indent=1)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_mesh(path) -> MeshGrid:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON ({exc})") from None
    return mesh_from_dict(d)
