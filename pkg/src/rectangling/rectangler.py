"""Per-image mesh fitting that turns a deformed-boundary image into a rectangle.

The warp is a (U+1) x (V+1) mesh of source nodes on the input image paired
with a regular mesh on the output rectangle.  Fitting minimises

    total = w_ap * data + w_ig * intergrid + w_bend * bending

in stages of growing freedom: a similarity (4 parameters), a homography
(8 parameters, the four corner positions) and finally the free node grid.
Every stage is expressed through the node positions it induces, so each
stage starts exactly where the previous one stopped.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import scipy.optimize

from .flow import FlowField
from .geometry import (
    apply_homography,
    corner_homography,
    image_center,
    image_corners,
    similarity_matrix,
)
from .mesh import (
    DegenerateMeshError,
    MeshGrid,
    MeshInterpolator,
    foldover_count,
    intergrid_loss_and_grad,
    regular_grid,
    warp_by_mesh,
)
from .raster import ImageBuffer, ValidMask, sample_array, sample_mask
from .tps import BendingQuadratic, ControlPointSet, evaluate, solve


class OptimizationError(RuntimeError):
    """The energy became non-finite during fitting."""


class MaskError(ValueError):
    """The valid mask is empty or not a single connected region."""


class Stage(enum.Enum):
    SIMILARITY_4DOF = "sim"
    HOMOGRAPHY_8DOF = "homo"
    TPS_GRID = "tps"

    @property
    def order(self) -> int:
        return _STAGE_ORDER[self]

    @classmethod
    def parse(cls, name: str) -> "Stage":
        key = name.strip().lower()
        if key in _STAGE_ALIASES:
            return _STAGE_ALIASES[key]
        raise ValueError(f"unknown stage {name!r}; expected one of sim, homo, tps")


_STAGE_ORDER = {Stage.SIMILARITY_4DOF: 0, Stage.HOMOGRAPHY_8DOF: 1, Stage.TPS_GRID: 2}
_STAGE_ALIASES = {
    "sim": Stage.SIMILARITY_4DOF,
    "similarity": Stage.SIMILARITY_4DOF,
    "similarity_4dof": Stage.SIMILARITY_4DOF,
    "homo": Stage.HOMOGRAPHY_8DOF,
    "homography": Stage.HOMOGRAPHY_8DOF,
    "homography_8dof": Stage.HOMOGRAPHY_8DOF,
    "tps": Stage.TPS_GRID,
    "grid": Stage.TPS_GRID,
    "tps_grid": Stage.TPS_GRID,
}

DEFAULT_BUDGETS = {Stage.SIMILARITY_4DOF: 200, Stage.HOMOGRAPHY_8DOF: 300, Stage.TPS_GRID: 1500}
DEFAULT_SIGMAS = (4.0, 2.0, 1.0, 0.0)


@dataclass(frozen=True)
class EnergyWeights:
    ap: float = 1.0
    ig: float = 1.0
    bend: float = 1e-4

    def __post_init__(self):
        vals = (self.ap, self.ig, self.bend)
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("energy weights must be finite and non-negative")
        if not any(vals):
            raise ValueError("at least one energy weight must be positive")

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ig": self.ig, "bend": self.bend}


@dataclass(frozen=True)
class StagePlan:
    """Ordered stages with iteration budgets and a coarse-to-fine blur schedule.

    Each stage's budget is split across the blur levels ``sigmas`` (px).
    Iterations a level or stage leaves unused carry forward, so the plan's
    total budget is the binding cap.  The objective is always evaluated on
    a probe lattice of spacing ``probe_step`` for acceptance decisions.
    """

    stages: tuple[Stage, ...] = (Stage.SIMILARITY_4DOF, Stage.HOMOGRAPHY_8DOF, Stage.TPS_GRID)
    budgets: tuple[int, ...] | None = None
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    probe_step: int = 2

    def __post_init__(self):
        stages = tuple(s if isinstance(s, Stage) else Stage.parse(s) for s in self.stages)
        if not stages:
            raise ValueError("stage plan must not be empty")
        orders = [s.order for s in stages]
        if any(b < a for a, b in zip(orders, orders[1:])):
            raise ValueError("stages must appear in non-decreasing DoF order")
        budgets = self.budgets
        if budgets is None:
            budgets = tuple(DEFAULT_BUDGETS[s] for s in stages)
        budgets = tuple(int(b) for b in budgets)
        if len(budgets) != len(stages) or any(b < 0 for b in budgets):
            raise ValueError("need one non-negative budget per stage")
        sigmas = tuple(float(s) for s in self.sigmas) or (0.0,)
        if any(s < 0 for s in sigmas):
            raise ValueError("blur sigmas must be non-negative")
        if self.probe_step < 1:
            raise ValueError("probe_step must be >= 1")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def from_names(cls, names, budgets=None, **kw) -> "StagePlan":
        if isinstance(names, str):
            names = [n for n in names.split(",") if n.strip()]
        return cls(tuple(Stage.parse(n) for n in names), budgets, **kw)

    @property
    def total_budget(self) -> int:
        return sum(self.budgets)

    def to_dict(self) -> dict:
        return {
            "stages": [s.value for s in self.stages],
            "budgets": list(self.budgets),
            "sigmas": list(self.sigmas),
            "probe_step": self.probe_step,
        }


@dataclass(frozen=True)
class EnergyBreakdown:
    data: float
    intergrid: float
    bending: float
    total: float

    def to_dict(self) -> dict:
        return {"data": self.data, "intergrid": self.intergrid, "bending": self.bending, "total": self.total}


@dataclass
class StageTrace:
    stage: Stage
    initial_energy: float
    energies: list[float]
    iterations: int
    evaluations: int

    @property
    def final_energy(self) -> float:
        return self.energies[-1]

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "initial_energy": self.initial_energy,
            "energies": list(self.energies),
            "final_energy": self.final_energy,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
        }


@dataclass
class RectangleResult:
    src_mesh: MeshGrid
    dst_mesh: MeshGrid
    energy: EnergyBreakdown
    trace: list[StageTrace]
    weights: EnergyWeights
    mode: str
    size: tuple[int, int]
    similarity: dict | None = None
    corners: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "size": list(self.size),
            "grid": [self.src_mesh.rows - 1, self.src_mesh.cols - 1],
            "weights": self.weights.to_dict(),
            "energy": self.energy.to_dict(),
            "trace": [t.to_dict() for t in self.trace],
            "foldovers": foldover_count(self.src_mesh),
        }
        if self.similarity is not None:
            d["similarity"] = dict(self.similarity)
        if self.corners is not None:
            d["corners"] = np.asarray(self.corners).tolist()
        d.update(self.extras)
        return d


# ---------------------------------------------------------------------------
# Stage parameterisations


def similarity_to_mesh(scale: float, rotation: float, translation, grid, size) -> MeshGrid:
    """Regular grid moved by the similarity about the image centre."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    U, V = grid
    w, h = size
    base = regular_grid(U, V, w, h)
    H = similarity_matrix(scale, rotation, translation, image_center(size))
    return base.with_points(apply_homography(H, base.points))


def homography_corners_to_mesh(corners, grid, size) -> MeshGrid:
    """Regular grid moved by the homography taking the image corners to ``corners``."""
    U, V = grid
    w, h = size
    base = regular_grid(U, V, w, h)
    H = corner_homography(corners, size)
    return base.with_points(apply_homography(H, base.points))


class _SimilarityParams:
    """p = (A, B, tx, ty): nodes = c + [[1+a, -b], [b, 1+a]] (n - c) + t with a = A/rho."""

    def __init__(self, base: MeshGrid, size):
        self.base = base.points
        self.c = image_center(size)
        self.d = self.base - self.c
        self.rho = float(np.max(np.linalg.norm(self.d, axis=1)))
        perp = np.column_stack([-self.d[:, 1], self.d[:, 0]])
        J = np.zeros((self.base.size, 4))
        J[:, 0] = (self.d / self.rho).ravel()
        J[:, 1] = (perp / self.rho).ravel()
        J[0::2, 2] = 1.0
        J[1::2, 3] = 1.0
        self.J = J

    def initial(self):
        return np.zeros(4)

    def nodes(self, p):
        return self.base + (self.J @ p).reshape(-1, 2)

    def pull(self, p, g_nodes):
        return self.J.T @ g_nodes.ravel()

    def describe(self, p):
        a, b = p[0] / self.rho, p[1] / self.rho
        return {
            "scale": float(math.hypot(1.0 + a, b)),
            "rotation": float(math.atan2(b, 1.0 + a)),
            "translation": [float(p[2]), float(p[3])],
        }


class _HomographyParams:
    """p = corner offsets (8,) px from the image corners (TL, TR, BL, BR)."""

    FD_STEP = 1e-3

    def __init__(self, base: MeshGrid, size):
        self.base = base.points
        self.size = size
        self.c0 = image_corners(size)

    def initial(self, corners=None):
        if corners is None:
            return np.zeros(8)
        return (np.asarray(corners, dtype=np.float64) - self.c0).ravel()

    def corners(self, p):
        return self.c0 + p.reshape(4, 2)

    def nodes(self, p):
        H = corner_homography(self.corners(p), self.size)
        return apply_homography(H, self.base)

    def pull(self, p, g_nodes):
        g = np.empty(8)
        h = self.FD_STEP
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            dn = (self.nodes(p + e) - self.nodes(p - e)) / (2 * h)
            g[i] = np.sum(dn * g_nodes)
        return g


class _GridParams:
    def __init__(self, base: MeshGrid):
        self.base = base.points

    def initial(self, nodes=None):
        return (self.base if nodes is None else nodes).ravel().copy()

    def nodes(self, p):
        return p.reshape(-1, 2)

    def pull(self, p, g_nodes):
        return g_nodes.ravel()


# ---------------------------------------------------------------------------
# Data terms (functions of the source locations of the probe pixels)


def _probe_axis(n: int, step: int) -> np.ndarray:
    return np.unique(np.r_[np.arange(0, n, step), n - 1]).astype(np.float64)


def probe_lattice(size, step: int):
    w, h = size
    xs, ys = np.meshgrid(_probe_axis(w, step), _probe_axis(h, step))
    return xs.ravel(), ys.ravel()


def extend_valid(pixels: np.ndarray, mask: ValidMask) -> np.ndarray:
    """Copy of ``pixels`` with every invalid pixel replaced by its nearest valid one."""
    bits = mask.bits
    if bits.all():
        return pixels.copy()
    if not bits.any():
        raise MaskError("mask has no valid pixels")
    _, (iy, ix) = scipy.ndimage.distance_transform_edt(~bits, return_indices=True)
    return pixels[iy, ix]


def _blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return pixels
    return scipy.ndimage.gaussian_filter(pixels, sigma=(sigma, sigma, 0), mode="nearest")


class SupervisedData:
    """Mean absolute difference between the mesh-warped input and the target.

    The input is read with invalid pixels filled from their nearest valid
    neighbour so the content boundary does not bias the fit.  ``eps`` > 0
    replaces |r| by the smooth sqrt(r^2 + eps^2) - eps.
    """

    def __init__(self, source_ext: np.ndarray, target: np.ndarray, px, py, eps: float = 0.0):
        self.source = source_ext
        ix = np.asarray(px, dtype=np.int64)
        iy = np.asarray(py, dtype=np.int64)
        self.target = target[iy, ix]
        self.eps = eps
        self.denom = self.target.size

    def __call__(self, loc: np.ndarray, with_grad: bool = True):
        if not with_grad:
            v, _ = sample_array(self.source, loc[:, 0], loc[:, 1], "clamp")
            return float(np.abs(v - self.target).sum() / self.denom), None
        v, _, dx, dy = sample_array(self.source, loc[:, 0], loc[:, 1], "clamp", with_grad=True)
        r = v - self.target
        if self.eps > 0:
            s = np.sqrt(r * r + self.eps * self.eps)
            value = float((s - self.eps).sum() / self.denom)
            dr = r / s
        else:
            value = float(np.abs(r).sum() / self.denom)
            dr = np.sign(r)
        g = np.column_stack([(dr * dx).sum(axis=1), (dr * dy).sum(axis=1)]) / self.denom
        return value, g


def signed_distance(mask: ValidMask, pad: int | None = None) -> tuple[np.ndarray, int]:
    """Signed distance to the valid region on a padded canvas.

    Zero on the outermost valid pixels, negative deeper inside, positive
    outside; the canvas extends ``pad`` px past the image on every side.
    """
    bits = mask.bits
    if pad is None:
        pad = max(bits.shape) // 2
    canvas = np.zeros((bits.shape[0] + 2 * pad, bits.shape[1] + 2 * pad), dtype=bool)
    canvas[pad:-pad, pad:-pad] = bits
    d_out = scipy.ndimage.distance_transform_edt(~canvas)
    d_in = scipy.ndimage.distance_transform_edt(canvas)
    sd = np.where(canvas, 1.0 - d_in, d_out)
    return sd, pad


def _huber_hinge(z: np.ndarray, delta: float):
    """Smoothed max(z, 0): quadratic on [0, delta], linear beyond."""
    pos = np.maximum(z, 0.0)
    val = np.where(pos < delta, pos * pos / (2 * delta), pos - delta / 2)
    der = np.where(pos < delta, pos / delta, 1.0)
    return val, der


class CoverageData:
    """Keeps every probe on valid content and pulls the output border onto the content border.

    Interior probes pay hinge(sd + margin); border probes additionally pay
    ``pull * hinge(-sd - margin)`` so the output frame cannot shrink inside
    the content.  Both means are taken over their probe sets.
    """

    def __init__(self, mask: ValidMask, px, py, size, margin: float = 1.0, pull: float = 0.25,
                 delta: float = 0.5):
        self.sd, self.pad = signed_distance(mask)
        w, h = size
        px = np.asarray(px)
        py = np.asarray(py)
        self.border = (px == 0) | (py == 0) | (px == w - 1) | (py == h - 1)
        self.n_all = len(px)
        self.n_border = max(1, int(self.border.sum()))
        self.margin = margin
        self.pull = pull
        self.delta = delta
        self._field = self.sd[:, :, None]

    def sample(self, loc: np.ndarray):
        x = loc[:, 0] + self.pad
        y = loc[:, 1] + self.pad
        hgt, wid = self.sd.shape
        cx = np.clip(x, 0.0, wid - 1.0)
        cy = np.clip(y, 0.0, hgt - 1.0)
        v, _, dx, dy = sample_array(self._field, cx, cy, "clamp", with_grad=True)
        ex, ey = x - cx, y - cy
        beyond = np.hypot(ex, ey)
        with np.errstate(invalid="ignore", divide="ignore"):
            gx = np.where(beyond > 0, ex / np.where(beyond > 0, beyond, 1.0), dx[:, 0])
            gy = np.where(beyond > 0, ey / np.where(beyond > 0, beyond, 1.0), dy[:, 0])
        return v[:, 0] + beyond, gx, gy

    def __call__(self, loc: np.ndarray, with_grad: bool = True):
        sd, gx, gy = self.sample(loc)
        val_in, der_in = _huber_hinge(sd + self.margin, self.delta)
        val_out, der_out = _huber_hinge(-sd - self.margin, self.delta)
        value = val_in.sum() / self.n_all + self.pull * val_out[self.border].sum() / self.n_border
        if not with_grad:
            return float(value), None
        dsd = der_in / self.n_all
        dsd[self.border] -= self.pull * der_out[self.border] / self.n_border
        return float(value), np.column_stack([dsd * gx, dsd * gy])


# ---------------------------------------------------------------------------
# Energy on node positions


_DEGENERATE_PENALTY = 1e6


class MeshEnergy:
    """total(nodes) and its gradient for a data term evaluated on a probe lattice."""

    def __init__(self, dst: MeshGrid, data, px, py, weights: EnergyWeights,
                 bending: BendingQuadratic | None = None):
        self.dst = dst
        self.data = data
        self.weights = weights
        self.interp = MeshInterpolator(dst, px, py)
        self.bending = bending if bending is not None else BendingQuadratic(dst.points)

    def terms(self, nodes: np.ndarray) -> EnergyBreakdown:
        nodes = np.asarray(nodes, dtype=np.float64).reshape(-1, 2)
        loc = self.interp.map(nodes)
        d, _ = self.data(loc, with_grad=False)
        ig, _ = intergrid_loss_and_grad(nodes.reshape(self.dst.rows, self.dst.cols, 2), with_grad=False)
        b = self.bending.energy(nodes)
        w = self.weights
        return EnergyBreakdown(d, ig, b, w.ap * d + w.ig * ig + w.bend * b)

    def total(self, nodes) -> float:
        return self.terms(nodes).total

    def value_and_grad(self, nodes: np.ndarray):
        nodes = nodes.reshape(-1, 2)
        w = self.weights
        loc = self.interp.map(nodes)
        d, g_loc = self.data(loc)
        grad = w.ap * self.interp.pullback(g_loc)
        try:
            ig, g_ig = intergrid_loss_and_grad(nodes.reshape(self.dst.rows, self.dst.cols, 2))
        except DegenerateMeshError:
            return _DEGENERATE_PENALTY, np.zeros_like(nodes)
        grad += w.ig * g_ig.reshape(-1, 2)
        b = self.bending.energy(nodes)
        grad += w.bend * self.bending.gradient(nodes)
        return w.ap * d + w.ig * ig + w.bend * b, grad


# ---------------------------------------------------------------------------
# Staged optimisation


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise OptimizationError(f"non-finite energy during {where}")


class _Fitter:
    """Shared driver for the supervised and unsupervised fits."""

    def __init__(self, size, grid, weights: EnergyWeights, plan: StagePlan, make_data):
        self.size = size
        self.grid = grid
        self.weights = weights
        self.plan = plan
        self.make_data = make_data  # (sigma, px, py) -> data term
        U, V = grid
        self.dst = regular_grid(U, V, size[0], size[1])
        self.bending = BendingQuadratic(self.dst.points)
        self._energies: dict = {}

    def energy(self, sigma: float, step: int) -> MeshEnergy:
        key = (sigma, step)
        if key not in self._energies:
            px, py = probe_lattice(self.size, step)
            data = self.make_data(sigma, px, py)
            self._energies[key] = MeshEnergy(self.dst, data, px, py, self.weights, self.bending)
        return self._energies[key]

    def _param_map(self, stage: Stage):
        if stage is Stage.SIMILARITY_4DOF:
            return _SimilarityParams(self.dst, self.size)
        if stage is Stage.HOMOGRAPHY_8DOF:
            return _HomographyParams(self.dst, self.size)
        return _GridParams(self.dst)

    def _initial(self, stage: Stage, pmap, state):
        prev_stage, prev_map, prev_p = state
        if prev_stage is None:
            return pmap.initial()
        if stage is prev_stage:
            return prev_p.copy()
        nodes = prev_map.nodes(prev_p)
        if stage is Stage.HOMOGRAPHY_8DOF:
            r, c = self.dst.rows, self.dst.cols
            return pmap.initial(nodes[[0, c - 1, (r - 1) * c, r * c - 1]])
        return pmap.initial(nodes)

    def _level_steps(self, sigma: float) -> int:
        return max(self.plan.probe_step, int(sigma))

    def run(self) -> tuple[np.ndarray, list[StageTrace], dict]:
        sharp = self.energy(0.0, self.plan.probe_step)
        state = (None, None, None)
        traces = []
        info: dict = {}
        carry = 0  # iterations left unused by earlier stages and levels
        for stage, budget in zip(self.plan.stages, self.plan.budgets):
            pmap = self._param_map(stage)
            p = self._initial(stage, pmap, state)
            best_e = sharp.total(pmap.nodes(p))
            _check_finite(best_e, stage.value)
            trace = StageTrace(stage, best_e, [best_e], 0, 0)
            left = budget + carry
            n_levels = len(self.plan.sigmas)
            for k, sigma in enumerate(self.plan.sigmas):
                b = left // (n_levels - k)
                if b == 0:
                    continue
                obj = self.energy(sigma, self._level_steps(sigma))

                def fun(q, obj=obj, pmap=pmap):
                    try:
                        nodes = pmap.nodes(q)
                    except ValueError:
                        return _DEGENERATE_PENALTY, np.zeros_like(q)
                    e, g = obj.value_and_grad(nodes)
                    return e, pmap.pull(q, g)

                res = scipy.optimize.minimize(
                    fun, p, jac=True, method="L-BFGS-B",
                    options={"maxiter": b, "maxfun": 4 * b + 20, "ftol": 1e-13, "gtol": 1e-10},
                )
                trace.iterations += int(res.nit)
                trace.evaluations += int(res.nfev)
                left -= min(int(res.nit), b)
                try:
                    e = sharp.total(pmap.nodes(res.x))
                except ValueError:
                    e = math.inf
                if not math.isfinite(float(res.fun)):
                    raise OptimizationError(f"non-finite energy during {stage.value}")
                if e <= best_e:
                    p, best_e = res.x, e
                trace.energies.append(best_e)
            traces.append(trace)
            carry = left
            state = (stage, pmap, p)
            if stage is Stage.SIMILARITY_4DOF:
                info["similarity"] = pmap.describe(p)
            elif stage is Stage.HOMOGRAPHY_8DOF:
                info["corners"] = pmap.corners(p)
        stage, pmap, p = state
        return pmap.nodes(p), traces, info

    def result(self, mode: str, extras=None) -> RectangleResult:
        nodes, traces, info = self.run()
        src = self.dst.with_points(nodes)
        full = self.energy(0.0, 1).terms(nodes)
        _check_finite(full.total, "final evaluation")
        return RectangleResult(
            src, self.dst, full, traces, self.weights, mode, tuple(self.size),
            similarity=info.get("similarity"), corners=info.get("corners"),
            extras=dict(extras or {}),
        )


def _as_grid(grid) -> tuple[int, int]:
    U, V = (int(g) for g in grid)
    if U < 1 or V < 1:
        raise ValueError("grid cell counts must be >= 1")
    return U, V


def fit_supervised(
    rectified: ImageBuffer,
    mask: ValidMask | None,
    gt: ImageBuffer,
    grid=(8, 8),
    weights: EnergyWeights | None = None,
    plan: StagePlan | None = None,
    seed: int = 0,
    smoothing: float = 0.0,
) -> RectangleResult:
    """Fit the mesh whose warp of ``rectified`` best matches ``gt`` (mean L1)."""
    if (rectified.width, rectified.height) != (gt.width, gt.height):
        raise ValueError("rectified and gt must have the same size")
    if rectified.channels != gt.channels:
        raise ValueError("rectified and gt must have the same channel count")
    if mask is None:
        mask = ValidMask.full(rectified.width, rectified.height)
    weights = weights or EnergyWeights()
    plan = plan or StagePlan()
    size = (rectified.width, rectified.height)
    source = extend_valid(rectified.pixels, mask)
    blurred: dict = {}

    def make_data(sigma, px, py):
        if sigma not in blurred:
            blurred[sigma] = (_blur(source, sigma), _blur(gt.pixels, sigma))
        s, t = blurred[sigma]
        return SupervisedData(s, t, px, py, eps=smoothing)

    fitter = _Fitter(size, _as_grid(grid), weights, plan, make_data)
    return fitter.result("supervised", {"seed": int(seed), "plan": plan.to_dict()})


def _check_mask(mask: ValidMask) -> None:
    if not mask.bits.any():
        raise MaskError("mask has no valid pixels")
    _, n = scipy.ndimage.label(mask.bits, structure=np.ones((3, 3), dtype=bool))
    if n != 1:
        raise MaskError(f"mask must be one connected region, found {n}")


def rectangle_unsupervised(
    rectified: ImageBuffer,
    mask: ValidMask,
    grid=(8, 8),
    weights: EnergyWeights | None = None,
    plan: StagePlan | None = None,
    seed: int = 0,
    margin: float = 1.0,
) -> RectangleResult:
    """Fit the mesh that stretches the valid region of ``mask`` over the whole rectangle."""
    if (mask.width, mask.height) != (rectified.width, rectified.height):
        raise ValueError("mask and image sizes differ")
    _check_mask(mask)
    weights = weights or EnergyWeights()
    plan = plan or StagePlan()
    size = (rectified.width, rectified.height)

    def make_data(sigma, px, py):
        return CoverageData(mask, px, py, size, margin=margin)

    # the coverage term is not image based, so blur levels collapse to one
    plan = StagePlan(plan.stages, plan.budgets, (0.0,), plan.probe_step)
    fitter = _Fitter(size, _as_grid(grid), weights, plan, make_data)
    res = fitter.result("unsupervised", {"seed": int(seed), "plan": plan.to_dict()})
    _, warped_mask = warp_by_mesh(rectified, res.src_mesh, res.dst_mesh, src_mask=mask)
    res.extras["coverage"] = warped_mask.coverage()
    return res


def reconstruct(rectified: ImageBuffer, mask: ValidMask | None, result: RectangleResult):
    """Warp the input onto the output rectangle with the fitted mesh."""
    return warp_by_mesh(rectified, result.src_mesh, result.dst_mesh, policy="zero",
                        out_size=result.size, src_mask=mask)


def mesh_energy(rectified, mask, gt, src_mesh: MeshGrid, weights: EnergyWeights | None = None,
                step: int = 1) -> EnergyBreakdown:
    """Energy breakdown of a given source mesh (supervised data term if ``gt`` is given)."""
    weights = weights or EnergyWeights()
    size = (rectified.width, rectified.height)
    dst = regular_grid(src_mesh.rows - 1, src_mesh.cols - 1, size[0], size[1])
    px, py = probe_lattice(size, step)
    if mask is None:
        mask = ValidMask.full(*size)
    if gt is not None:
        data = SupervisedData(extend_valid(rectified.pixels, mask), gt.pixels, px, py)
    else:
        data = CoverageData(mask, px, py, size)
    return MeshEnergy(dst, data, px, py, weights).terms(src_mesh.points)


def rectangling_flow(result: RectangleResult, size=None) -> FlowField:
    """Displacement from each input pixel to its position on the output rectangle."""
    w, h = size if size is not None else result.size
    t = solve(ControlPointSet(result.src_mesh.points, result.dst_mesh.points))
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    out = evaluate(t, pts)
    return FlowField((out - pts).reshape(h, w, 2))


def flow_radial_center(flow: FlowField, mask: ValidMask | None = None) -> np.ndarray:
    """Least-squares point ``c`` that the flow vectors point towards or away from.

    Each defined vector f at p contributes the constraint f x (p - c) = 0,
    weighted by |f| so that near-zero vectors carry no direction.  More
    stable than the argmin of |f|, which is flat for cubic radial fields.
    """
    h, w = flow.vectors.shape[:2]
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    keep = flow.defined()
    if mask is not None:
        keep &= mask.bits
    fx, fy = flow.u[keep], flow.v[keep]
    px, py = xs[keep], ys[keep]
    A = np.column_stack([fy, -fx])
    b = fy * px - fx * py
    if len(b) < 2:
        raise ValueError("not enough defined flow vectors")
    c, *_ = np.linalg.lstsq(A, b, rcond=None)
    return c


def gradient_check(fun, grad, x, directions=None, h: float = 1e-4, n_directions: int = 8,
                   seed: int = 0) -> float:
    """Max relative error between ``grad(x) . d`` and central differences of ``fun`` along ``d``."""
    x = np.asarray(x, dtype=np.float64)
    if directions is None:
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((n_directions,) + x.shape)
    g = np.asarray(grad(x), dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for d in directions:
        d = np.asarray(d, dtype=np.float64).reshape(x.shape)
        d = d / np.linalg.norm(d)
        fd = (fun(x + h * d) - fun(x - h * d)) / (2 * h)
        an = float(np.sum(g * d))
        scale = max(abs(fd), abs(an), 1e-12)
        worst = max(worst, abs(fd - an) / scale)
    return worst


def warped_mask_coverage(result: RectangleResult, mask: ValidMask) -> float:
    xs, ys = np.meshgrid(np.arange(result.size[0], dtype=np.float64),
                         np.arange(result.size[1], dtype=np.float64))
    interp = MeshInterpolator(result.dst_mesh, xs, ys)
    loc = interp.map(result.src_mesh.points)
    return float(sample_mask(mask, loc[:, 0], loc[:, 1]).mean())
