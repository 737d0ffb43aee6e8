"""Planted-truth pair generation for the similarity, homography and rectangling stages."""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage
import scipy.optimize

from . import distortion as dist
from .geometry import apply_homography, corner_homography, image_corners, is_convex_quad
from .mesh import MeshGrid, read_mesh, regular_grid, write_mesh
from .raster import (
    ImageBuffer,
    ValidMask,
    atomic_write_bytes,
    load_image,
    sample_array,
    save_image,
    save_mask,
)
from .rectangler import homography_corners_to_mesh, similarity_to_mesh
from .tps import ControlPointSet, dense_warp, evaluate, solve

STAGES = ("SIM4", "HOMO8", "RECT")
MAX_TRIES = 100
IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class GenerationError(RuntimeError):
    """Rejection sampling ran out of tries."""


class ManifestError(ValueError):
    pass


def fnv1a64(*values: int) -> int:
    """64-bit FNV-1a over the little-endian 8-byte encodings of ``values``."""
    h = _FNV_OFFSET
    for v in values:
        for byte in struct.pack("<Q", int(v) & _MASK64):
            h ^= byte
            h = (h * _FNV_PRIME) & _MASK64
    return h


def item_seed(master: int, index: int) -> int:
    return fnv1a64(master, index)


def item_rng(master: int, index: int) -> np.random.Generator:
    return np.random.default_rng(item_seed(master, index))


# ---------------------------------------------------------------------------
# Parameter ranges


@dataclass(frozen=True)
class SimilarityRanges:
    scale: tuple[float, float] = (0.9, 1.1)
    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    translation: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        if not 0 < self.scale[0] <= self.scale[1]:
            raise ValueError("scale range must be positive and ordered")
        if not -90 < self.rotation_deg[0] <= self.rotation_deg[1] < 90:
            raise ValueError("rotation range must lie inside (-90, 90) degrees")
        if self.translation[0] > self.translation[1]:
            raise ValueError("translation range must be ordered")


@dataclass(frozen=True)
class DistortionRanges:
    """Coefficient magnitudes for draws; k1 is negative, k2..k4 take either sign.

    Magnitudes are drawn log-uniformly, with each range clipped so that the
    term's contribution at the image corner stays below ``term_cap`` px.
    A draw is kept only if the profile is monotone, shrinks content
    everywhere, and moves the outermost mesh node inward by a distance
    within ``corner_shift``, and bends every image side by at least
    ``min_bow`` px away from a straight line.
    """

    k1: tuple[float, float] = dist.PUBLISHED_RANGES["k1"]
    k2: tuple[float, float] = dist.PUBLISHED_RANGES["k2"]
    k3: tuple[float, float] = dist.PUBLISHED_RANGES["k3"]
    k4: tuple[float, float] = dist.PUBLISHED_RANGES["k4"]
    corner_shift: tuple[float, float] = (8.0, 32.0)
    term_cap: float = 64.0
    min_bow: float = 2.0
    principal_jitter: float = 0.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} magnitude range must be positive and ordered")
        if len(self.corner_shift) != 2 or not 0 <= self.corner_shift[0] <= self.corner_shift[1]:
            raise ValueError("corner_shift range must be non-negative and ordered")
        if not self.term_cap > 0:
            raise ValueError("term_cap must be positive")
        if self.min_bow < 0:
            raise ValueError("min_bow must be non-negative")
        if self.principal_jitter < 0:
            raise ValueError("principal_jitter must be non-negative")


# ---------------------------------------------------------------------------
# Sources


def synthetic_source(size: tuple[int, int], rng: np.random.Generator, channels: int = 3) -> ImageBuffer:
    """Smooth random texture: Gaussian-filtered noise at a coarse and a medium scale."""
    w, h = size
    scales = ((18.0, 1.0), (7.0, 0.6), (3.5, 0.25))
    lum = np.zeros((h, w))
    for sigma, amp in scales:
        layer = scipy.ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
        lum += amp * layer / (layer.std() + 1e-12)
    planes = []
    for _ in range(channels):
        tint = scipy.ndimage.gaussian_filter(rng.standard_normal((h, w)), 12.0, mode="wrap")
        planes.append(lum + 0.5 * tint / (tint.std() + 1e-12))
    arr = np.stack(planes, axis=-1)
    lo, hi = arr.min(), arr.max()
    arr = 0.08 + 0.84 * (arr - lo) / (hi - lo)
    return ImageBuffer(arr)


def list_sources(src_dir) -> list[Path]:
    paths = sorted(p for p in Path(src_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no source images in {src_dir}")
    return paths


def fit_to_size(img: ImageBuffer, size: tuple[int, int], rng: np.random.Generator) -> ImageBuffer:
    """Random crop to ``size``; images that are too small are upscaled first."""
    w, h = size
    arr = img.pixels
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    zoom = max(w / arr.shape[1], h / arr.shape[0])
    if zoom > 1:
        arr = np.clip(scipy.ndimage.zoom(arr, (zoom, zoom, 1), order=1), 0.0, 1.0)
    y0 = int(rng.integers(0, arr.shape[0] - h + 1))
    x0 = int(rng.integers(0, arr.shape[1] - w + 1))
    return ImageBuffer(np.ascontiguousarray(arr[y0 : y0 + h, x0 : x0 + w]))


# ---------------------------------------------------------------------------
# Pairs


@dataclass
class PlantedPair:
    """``input`` is ``gt`` seen through the planted warp; warping ``input``
    with ``mesh`` on a regular output grid gives back ``gt``."""

    input: ImageBuffer
    mask: ValidMask
    gt: ImageBuffer
    mesh: MeshGrid
    params: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.gt.width, self.gt.height


def warp_by_planted_mesh(gt: ImageBuffer, mesh: MeshGrid) -> tuple[ImageBuffer, ValidMask]:
    """Render the input image of a pair: TPS from the planted mesh onto the regular grid."""
    dst = regular_grid(mesh.rows - 1, mesh.cols - 1, gt.width, gt.height)
    t = solve(ControlPointSet(mesh.points, dst.points))
    return dense_warp(gt, t, (gt.width, gt.height), policy="zero")


def _draw_similarity(ranges: SimilarityRanges, rng: np.random.Generator) -> dict:
    scale = float(rng.uniform(*ranges.scale))
    rotation = math.radians(float(rng.uniform(*ranges.rotation_deg)))
    tx, ty = (float(v) for v in rng.uniform(*ranges.translation, size=2))
    return {"scale": scale, "rotation": rotation, "translation": [tx, ty]}


def gen_similarity_pair(img: ImageBuffer, ranges: SimilarityRanges | None, rng: np.random.Generator,
                        grid=(8, 8)) -> PlantedPair:
    ranges = ranges or SimilarityRanges()
    params = _draw_similarity(ranges, rng)
    size = (img.width, img.height)
    mesh = similarity_to_mesh(params["scale"], params["rotation"], params["translation"], grid, size)
    warped, mask = warp_by_planted_mesh(img, mesh)
    return PlantedPair(warped, mask, img, mesh, params)


def _draw_corners(size, rho: float, rng: np.random.Generator) -> np.ndarray:
    base = image_corners(size)
    for _ in range(MAX_TRIES):
        corners = base + rng.uniform(-rho, rho, size=(4, 2))
        if is_convex_quad(corners):
            return corners
    raise GenerationError(f"no convex corner draw in {MAX_TRIES} tries")


def homography_warp(img: ImageBuffer, corners) -> tuple[ImageBuffer, ValidMask]:
    """Input image seen through the homography taking the image corners to ``corners``."""
    size = (img.width, img.height)
    H = corner_homography(corners, size)
    xs, ys = np.meshgrid(np.arange(size[0], dtype=np.float64), np.arange(size[1], dtype=np.float64))
    # input pixel p shows gt at H^-1 p
    src = apply_homography(np.linalg.inv(H), np.column_stack([xs.ravel(), ys.ravel()]))
    vals, valid = sample_array(img.pixels, src[:, 0], src[:, 1], "zero")
    vals = np.clip(vals, 0.0, 1.0).reshape(size[1], size[0], img.channels)
    return ImageBuffer(vals), ValidMask(valid.reshape(size[1], size[0]))


def gen_homography_pair(img: ImageBuffer, rho: float, rng: np.random.Generator, grid=(8, 8)) -> PlantedPair:
    """Four-corner perturbation of at most ``rho`` px per coordinate."""
    size = (img.width, img.height)
    if not 0 <= rho < min(size) / 4:
        raise ValueError("rho must lie in [0, min(w, h) / 4)")
    corners = _draw_corners(size, rho, rng)
    mesh = homography_corners_to_mesh(corners, grid, size)
    warped, mask = homography_warp(img, corners)
    return PlantedPair(warped, mask, img, mesh, {"rho": rho, "corners": corners.tolist()})


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def rectified_points(params: dist.DistortionParams, pts: np.ndarray) -> np.ndarray:
    """Where source pixels ``pts`` land in the rectified image."""
    c = np.array(params.principal)
    d = np.asarray(pts, dtype=np.float64) - c
    rho = np.linalg.norm(d, axis=1)
    t, ok = dist.invert_radial_array(params, rho)
    if not np.all(ok):
        raise dist.RadialRangeError("point outside the profile's range")
    if params.radial_mode == "angle":
        t = params.focal * np.tan(t)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(rho > 0, t / np.where(rho > 0, rho, 1.0), 1.0)
    return c + d * s[:, None]


def planted_rect_mesh(params: dist.DistortionParams, grid, size) -> MeshGrid:
    """Nodes of the rectified image that show the regular grid nodes of the source."""
    U, V = grid
    base = regular_grid(U, V, size[0], size[1])
    return base.with_points(rectified_points(params, base.points))


def side_bows(params: dist.DistortionParams, size, samples: int = 129) -> dict:
    """Minimax deviation from a straight line of each rectified image side (px)."""
    w, h = size
    ys = np.linspace(0.0, h - 1.0, samples)
    xs = np.linspace(0.0, w - 1.0, samples)
    sides = {
        "left": np.column_stack([np.zeros_like(ys), ys]),
        "right": np.column_stack([np.full_like(ys, w - 1.0), ys]),
        "top": np.column_stack([xs, np.zeros_like(xs)]),
        "bottom": np.column_stack([xs, np.full_like(xs, h - 1.0)]),
    }
    out = {}
    for name, pts in sides.items():
        q = rectified_points(params, pts)
        if name in ("left", "right"):
            out[name] = minimax_line_deviation(q[:, 1], q[:, 0])
        else:
            out[name] = minimax_line_deviation(q[:, 0], q[:, 1])
    return out


def _shrinks(params: dist.DistortionParams) -> bool:
    ts = np.linspace(0.0, params.t_max, 2049)[1:]
    return bool(np.all(dist.radial_profile(params, ts) >= ts))


def draw_distortion(size, ranges: DistortionRanges, rng: np.random.Generator, grid=(8, 8)):
    """Rejection-sample a shrinking, monotone profile with bounded corner displacement."""
    w, h = size
    extent = dist._corner_extent(((w - 1) / 2.0, (h - 1) / 2.0), size)
    for _ in range(MAX_TRIES):
        ks = []
        for i, name in enumerate(("k1", "k2", "k3", "k4")):
            lo, hi = getattr(ranges, name)
            hi = min(hi, ranges.term_cap / extent ** (2 * i + 3))
            sign = -1.0 if i == 0 else float(rng.choice((-1.0, 1.0)))
            ks.append(sign * _log_uniform(rng, min(lo, hi), hi))
        jitter = rng.uniform(-ranges.principal_jitter, ranges.principal_jitter, size=2) \
            if ranges.principal_jitter > 0 else np.zeros(2)
        principal = ((w - 1) / 2.0 + jitter[0], (h - 1) / 2.0 + jitter[1])
        coeffs = dist.published_coefficients(*ks)
        try:
            params = dist.DistortionParams(coeffs, principal, extent=dist._corner_extent(principal, size))
        except dist.NonMonotoneProfileError:
            continue
        if not _shrinks(params):
            continue
        mesh = planted_rect_mesh(params, grid, size)
        shift = float(np.max(np.linalg.norm(mesh.points - regular_grid(*grid, w, h).points, axis=1)))
        if not ranges.corner_shift[0] <= shift <= ranges.corner_shift[1]:
            continue
        bow = min(side_bows(params, size).values())
        if bow >= ranges.min_bow:
            return params, mesh, {"k_draw": ks, "corner_shift": shift, "min_bow": bow}
    raise GenerationError(f"no acceptable distortion draw in {MAX_TRIES} tries")


def gen_rectangling_pair(img: ImageBuffer, ranges: DistortionRanges | None, rng: np.random.Generator,
                         grid=(8, 8), params: dist.DistortionParams | None = None) -> PlantedPair:
    """Rectified input with deformed boundary, its mask, and the planted mesh.

    ``params`` overrides the random draw (e.g. with an identity profile).
    """
    size = (img.width, img.height)
    info: dict = {}
    if params is None:
        params, mesh, info = draw_distortion(size, ranges or DistortionRanges(), rng, grid)
    else:
        mesh = planted_rect_mesh(params, grid, size)
    rectified, mask = dist.rectify_image(img, params)
    record = {
        "k": list(params.k),
        "principal": list(params.principal),
        "focal": params.focal,
        "radial_mode": params.radial_mode,
        **info,
    }
    return PlantedPair(rectified, mask, img, mesh, record)


# ---------------------------------------------------------------------------
# Checks on generated pairs


def planted_consistency_psnr(pair: PlantedPair) -> float:
    """PSNR (inside both masks) between the input and gt warped by the planted mesh."""
    from .metrics import psnr

    warped, wmask = warp_by_planted_mesh(pair.gt, pair.mesh)
    both = ValidMask(wmask.bits & pair.mask.bits)
    return psnr(warped, pair.input, both)


def boundary_deviation(pair: PlantedPair, min_points: int = 12, corner_band: float = 4.0) -> dict:
    """Per-side deviation (px) of the content boundary from a straight line.

    Boundary pixels (valid with an invalid 4-neighbour, away from the image
    frame) are attributed to the source side their planted preimage lies
    closest to.  For left/right sides the extreme column per row is fitted
    by the minimax line ``x = a y + b`` (rows/columns swapped for top/bottom)
    and the deviation is its largest residual.
    """
    bits = pair.mask.bits
    h, w = bits.shape
    pad = np.pad(bits, 1, constant_values=True)
    nb_invalid = ~pad[:-2, 1:-1] | ~pad[2:, 1:-1] | ~pad[1:-1, :-2] | ~pad[1:-1, 2:]
    edge = bits & nb_invalid
    edge[0, :] = edge[-1, :] = False
    edge[:, 0] = edge[:, -1] = False
    ys, xs = np.nonzero(edge)
    out = {"left": 0.0, "right": 0.0, "top": 0.0, "bottom": 0.0}
    if len(xs) == 0:
        return out
    dst = regular_grid(pair.mesh.rows - 1, pair.mesh.cols - 1, w, h)
    t = solve(ControlPointSet(pair.mesh.points, dst.points))
    pre = evaluate(t, np.column_stack([xs, ys]).astype(np.float64))
    dists = np.column_stack([pre[:, 0], w - 1 - pre[:, 0], pre[:, 1], h - 1 - pre[:, 1]])
    order = np.sort(dists, axis=1)
    side = np.argmin(dists, axis=1)
    clear = order[:, 1] - order[:, 0] > corner_band
    for k, name in enumerate(("left", "right", "top", "bottom")):
        sel = clear & (side == k)
        if sel.sum() < min_points:
            continue
        if k < 2:
            along, across = ys[sel], xs[sel]
        else:
            along, across = xs[sel], ys[sel]
        ext = {}
        for a, c in zip(along, across):
            if a not in ext:
                ext[a] = c
            elif (k % 2 == 0 and c < ext[a]) or (k % 2 == 1 and c > ext[a]):
                ext[a] = c
        a = np.array(sorted(ext), dtype=np.float64)
        c = np.array([ext[v] for v in sorted(ext)], dtype=np.float64)
        if len(a) < min_points:
            continue
        out[name] = minimax_line_deviation(a, c)
    return out


def minimax_line_deviation(x: np.ndarray, y: np.ndarray) -> float:
    """Smallest t such that some line y = a x + b has |residual| <= t everywhere."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ones = np.ones_like(x)
    # variables (a, b, t): minimise t subject to +-(y - a x - b) <= t
    A = np.vstack([np.column_stack([-x, -ones, -ones]), np.column_stack([x, ones, -ones])])
    b = np.concatenate([-y, y])
    res = scipy.optimize.linprog([0.0, 0.0, 1.0], A_ub=A, b_ub=b, bounds=[(None, None)] * 3,
                                 method="highs")
    if not res.success:
        raise ValueError(f"line fit failed: {res.message}")
    return float(max(res.x[2], 0.0))


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class CurriculumSpec:
    stage: str
    count: int
    seed: int
    size: tuple[int, int] = (256, 256)
    grid: tuple[int, int] = (8, 8)
    similarity: SimilarityRanges = field(default_factory=SimilarityRanges)
    rho: float = 25.0
    distortion: DistortionRanges = field(default_factory=DistortionRanges)
    src_dir: str | None = None

    def __post_init__(self):
        self.stage = self.stage.upper()
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        self.size = tuple(int(v) for v in self.size)
        self.grid = tuple(int(v) for v in self.grid)
        if min(self.size) < 8:
            raise ValueError("image size must be at least 8x8")
        if min(self.grid) < 1:
            raise ValueError("grid cell counts must be >= 1")
        if isinstance(self.similarity, dict):
            self.similarity = SimilarityRanges(**{k: tuple(v) for k, v in self.similarity.items()})
        if isinstance(self.distortion, dict):
            self.distortion = DistortionRanges(
                **{k: (tuple(v) if isinstance(v, list) else v) for k, v in self.distortion.items()}
            )
        if self.stage == "HOMO8" and not 0 <= self.rho < min(self.size) / 4:
            raise ValueError("rho must lie in [0, min(w, h) / 4)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumSpec":
        return cls(**d)


def generate_item(spec: CurriculumSpec, index: int, sources: list[Path] | None = None) -> tuple[PlantedPair, int]:
    seed = item_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    if sources:
        src_path = sources[int(rng.integers(len(sources)))]
        img = fit_to_size(load_image(src_path), spec.size, rng)
    else:
        img = synthetic_source(spec.size, rng)
    if spec.stage == "SIM4":
        pair = gen_similarity_pair(img, spec.similarity, rng, spec.grid)
    elif spec.stage == "HOMO8":
        pair = gen_homography_pair(img, spec.rho, rng, spec.grid)
    else:
        pair = gen_rectangling_pair(img, spec.distortion, rng, spec.grid)
    return pair, seed


def item_paths(stage: str, index: int) -> dict:
    stem = f"{stage}/{index:05d}"
    return {
        "input": f"{stem}_input.ppm",
        "mask": f"{stem}_mask.pgm",
        "gt": f"{stem}_gt.ppm",
        "mesh": f"{stem}_mesh.json",
    }


def _worker_count(threads: int | None) -> int:
    import os

    if threads is None:
        threads = int(os.environ.get("RECREC_THREADS", "0") or 0)
    return threads if threads > 0 else (os.cpu_count() or 1)


def generate_dataset(spec: CurriculumSpec, out_dir, threads: int | None = None) -> list[dict]:
    """Write every item of ``spec`` under ``out_dir`` plus ``manifest.json``."""
    out = Path(out_dir)
    (out / spec.stage).mkdir(parents=True, exist_ok=True)
    sources = list_sources(spec.src_dir) if spec.src_dir else None

    def work(index: int) -> dict:
        pair, seed = generate_item(spec, index, sources)
        paths = item_paths(spec.stage, index)
        save_image(pair.input, out / paths["input"])
        save_mask(pair.mask, out / paths["mask"])
        save_image(pair.gt, out / paths["gt"])
        write_mesh(pair.mesh, out / paths["mesh"])
        return {"index": index, "seed": seed, **paths, "params": pair.params}

    with ThreadPoolExecutor(max_workers=_worker_count(threads)) as pool:
        items = list(pool.map(work, range(spec.count)))
    write_manifest(spec, items, out / "manifest.json")
    return items


_ITEM_FIELDS = ("index", "seed", "input", "mask", "gt", "mesh", "params")


def write_manifest(spec: CurriculumSpec, items: list[dict], path) -> None:
    doc = {"spec": spec.to_dict(), "items": list(items)}
    atomic_write_bytes(path, json.dumps(doc, indent=1).encode("utf-8"))


def read_manifest(path) -> tuple[CurriculumSpec, list[dict]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "spec" not in doc or "items" not in doc:
        raise ManifestError(f"{path}: manifest needs 'spec' and 'items'")
    try:
        spec = CurriculumSpec.from_dict(doc["spec"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: bad spec ({exc})") from None
    items = doc["items"]
    if not isinstance(items, list):
        raise ManifestError(f"{path}: items must be a list")
    for i, item in enumerate(items):
        missing = [f for f in _ITEM_FIELDS if f not in item]
        if missing:
            raise ManifestError(f"{path}: item {i} lacks {', '.join(missing)}")
    return spec, items


def load_item(root, item: dict) -> PlantedPair:
    from .raster import load_mask

    root = Path(root)
    return PlantedPair(
        load_image(root / item["input"]),
        load_mask(root / item["mask"]),
        load_image(root / item["gt"]),
        read_mesh(root / item["mesh"]),
        item.get("params", {}),
    )
