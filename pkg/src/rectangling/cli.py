"""Command-line entry point: distort, rectify, rectangle, gen, eval, viz.

Exit codes: 0 success, 2 invalid arguments, 3 I/O or file-format error,
4 numerical error (non-monotone profile, degenerate geometry),
5 optimisation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import curriculum, distortion, metrics
from .flow import FlowFormatError, read_flo, write_flo
from .geometry import DegenerateHomographyError
from .mesh import MeshFormatError, read_mesh, write_mesh
from .raster import (
    ImageBuffer,
    ImageFormatError,
    ValidMask,
    atomic_write_bytes,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from .rectangler import (
    EnergyWeights,
    MaskError,
    OptimizationError,
    StagePlan,
    fit_supervised,
    reconstruct,
    rectangle_unsupervised,
    rectangling_flow,
)
from .tps import DegenerateConfigurationError

log = logging.getLogger("rectangling")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_OPTIMIZATION = 5


class UsageError(Exception):
    """Argument values that parse but make no sense."""


# ---------------------------------------------------------------------------
# Argument helpers


def parse_pair(text: str, sep: str = "x", kind=int) -> tuple:
    parts = str(text).lower().replace(",", sep).split(sep)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two values like 8{sep}8, got {text!r}")
    try:
        return kind(parts[0]), kind(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad numbers in {text!r}") from None


def grid_arg(text: str) -> tuple[int, int]:
    U, V = parse_pair(text)
    if U < 1 or V < 1:
        raise argparse.ArgumentTypeError("grid cell counts must be >= 1")
    return U, V


def point_arg(text: str) -> tuple[float, float]:
    return parse_pair(text, ",", float)


def float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from None


def _coerce(value, default_type):
    if isinstance(value, list) and default_type in (grid_arg, point_arg):
        return tuple(value)
    if isinstance(value, str) and default_type is not None:
        return default_type(value)
    return value


def thread_count() -> int:
    raw = os.environ.get("RECREC_THREADS", "0") or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RECREC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("RECREC_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1) + "\n").encode("utf-8"))


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


def _output_path(path: str) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def write_run_config(out_dir: Path, args: argparse.Namespace) -> None:
    cfg = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "run_config.json", cfg)


# ---------------------------------------------------------------------------
# Commands


def _distortion_params(args, size) -> distortion.DistortionParams:
    if args.coeffs:
        coeffs = tuple(args.coeffs)
    elif args.mode == "pixel_radius":
        coeffs = distortion.published_coefficients(args.k1, args.k2, args.k3, args.k4)
    else:
        raise UsageError("angle mode needs explicit --coeffs")
    w, h = size
    principal = args.principal if args.principal is not None else ((w - 1) / 2.0, (h - 1) / 2.0)
    extent = distortion._corner_extent(principal, size)
    return distortion.DistortionParams(coeffs, principal, args.focal, args.mode, extent)


def cmd_distort(args) -> int:
    src = load_image(args.input)
    params = _distortion_params(args, (src.width, src.height))
    out, mask = distortion.synthesize_with_mask(src, params)
    save_image(out, _output_path(args.output))
    if args.emit_mask:
        save_mask(mask, args.emit_mask)
    write_run_config(Path(args.output).parent, args)
    return EXIT_OK


def cmd_rectify(args) -> int:
    src = load_image(args.input)
    params = _distortion_params(args, (src.width, src.height))
    out_size = args.size or (src.width, src.height)
    out, mask = distortion.rectify_image(src, params, out_size)
    save_image(out, _output_path(args.output))
    if args.emit_mask:
        save_mask(mask, args.emit_mask)
    if args.emit_flow:
        write_flo(distortion.rectification_flow(params, (src.width, src.height)), args.emit_flow)
    write_run_config(Path(args.output).parent, args)
    return EXIT_OK


def _plan(args) -> StagePlan:
    budgets = tuple(args.budgets) if args.budgets else None
    try:
        return StagePlan.from_names(args.stages, budgets, sigmas=tuple(args.sigmas),
                                    probe_step=args.probe_step)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _weights(args) -> EnergyWeights:
    try:
        if args.weights:
            if len(args.weights) != 3:
                raise ValueError("--weights takes ap,ig,bend")
            return EnergyWeights(*args.weights)
        return EnergyWeights()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_rectangle(args) -> int:
    img = load_image(args.input)
    mask = load_mask(args.mask) if args.mask else ValidMask.full(img.width, img.height)
    if (mask.width, mask.height) != (img.width, img.height):
        raise UsageError("mask size does not match the input image")
    plan = _plan(args)
    weights = _weights(args)
    if args.gt:
        gt = load_image(args.gt)
        res = fit_supervised(img, mask, gt, args.grid, weights, plan, args.seed)
    else:
        res = rectangle_unsupervised(img, mask, args.grid, weights, plan, args.seed)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    warped, wmask = reconstruct(img, mask, res)
    save_image(warped, f"{prefix}_warped.ppm")
    save_mask(wmask, f"{prefix}_warped_mask.pgm")
    if args.emit_mesh:
        write_mesh(res.src_mesh, f"{prefix}_src_mesh.json")
        write_mesh(res.dst_mesh, f"{prefix}_dst_mesh.json")
    if args.emit_flow:
        write_flo(rectangling_flow(res), f"{prefix}_flow.flo")
    summary = res.to_dict()
    _write_json(Path(f"{prefix}_energy.json"), summary)
    write_run_config(prefix.parent, args)
    print(json.dumps({"energy": summary["energy"], "foldovers": summary["foldovers"]}))
    return EXIT_OK


_STAGE_NAMES = {"sim": "SIM4", "sim4": "SIM4", "homo": "HOMO8", "homo8": "HOMO8", "rect": "RECT"}


def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    stage = _STAGE_NAMES.get(args.stage.lower())
    if stage is None:
        raise UsageError(f"unknown stage {args.stage!r}")
    try:
        spec = curriculum.CurriculumSpec(
            stage, args.count, args.seed, args.size, args.grid,
            rho=args.rho,
            distortion=curriculum.DistortionRanges(
                corner_shift=tuple(args.corner_shift), min_bow=args.min_bow,
                principal_jitter=args.principal_jitter,
            ),
            src_dir=args.src_dir,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    items = curriculum.generate_dataset(spec, out, threads=thread_count())
    write_run_config(out, args)
    print(json.dumps({"stage": stage, "items": len(items), "manifest": str(out / "manifest.json")}))
    return EXIT_OK


_METRICS = ("psnr", "ssim", "mesh", "epe")
_IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


def _eval_file(name: str, pred: Path, gt: Path, wanted: set) -> metrics.EvalItem | None:
    item = metrics.EvalItem(name)
    suffix = pred.suffix.lower()
    if suffix in _IMAGE_SUFFIXES and wanted & {"psnr", "ssim"}:
        a, b = load_image(pred), load_image(gt)
        if "psnr" in wanted:
            item.psnr = metrics.psnr(a, b)
        if "ssim" in wanted:
            item.ssim = metrics.ssim(a, b)
    elif suffix == ".json" and "mesh" in wanted:
        try:
            item.mesh_rmse = metrics.mesh_rmse(read_mesh(pred), read_mesh(gt))
        except MeshFormatError:
            return None
    elif suffix == ".flo" and "epe" in wanted:
        item.epe = metrics.flow_epe(read_flo(pred), read_flo(gt))
    else:
        return None
    return item


def cmd_eval(args) -> int:
    wanted = set(args.metrics)
    unknown = wanted - set(_METRICS)
    if unknown:
        raise UsageError(f"unknown metrics: {', '.join(sorted(unknown))}")
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    names = sorted(p.relative_to(pred_dir).as_posix() for p in pred_dir.rglob("*") if p.is_file())
    names = [n for n in names if (gt_dir / n).is_file() and Path(n).name != "run_config.json"]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        rows = list(pool.map(lambda n: _eval_file(n, pred_dir / n, gt_dir / n, wanted), names))
    report = metrics.EvalReport([r for r in rows if r is not None])
    if not report.items:
        raise UsageError("no comparable files found in both directories")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "eval.json", report.to_json().encode("utf-8"))
        atomic_write_bytes(out / "eval.txt", report.to_table().encode("utf-8"))
        write_run_config(out, args)
    sys.stdout.write(report.to_table())
    return EXIT_OK


def draw_mesh(img: ImageBuffer, mesh, color=(1.0, 0.2, 0.2)) -> ImageBuffer:
    """Overlay mesh edges by dense sampling along each segment."""
    px = img.pixels.copy()
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    h, w = px.shape[:2]
    g = mesh.grid
    segs = [(g[r, c], g[r, c + 1]) for r in range(mesh.rows) for c in range(mesh.cols - 1)]
    segs += [(g[r, c], g[r + 1, c]) for r in range(mesh.rows - 1) for c in range(mesh.cols)]
    for a, b in segs:
        n = int(np.ceil(np.linalg.norm(b - a))) * 2 + 2
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts = np.rint(a + t * (b - a)).astype(np.int64)
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
        pts = pts[keep]
        px[pts[:, 1], pts[:, 0]] = color
    for x, y in mesh.points:
        xi, yi = int(round(x)), int(round(y))
        if 0 <= xi < w and 0 <= yi < h:
            px[max(0, yi - 1) : yi + 2, max(0, xi - 1) : xi + 2] = (1.0, 1.0, 0.0)
    return ImageBuffer(px)


def cmd_viz(args) -> int:
    if bool(args.flow) == bool(args.mesh):
        raise UsageError("give exactly one of --flow or --mesh")
    if args.flow:
        out = metrics.flow_to_color(read_flo(args.flow), args.max_norm)
    else:
        if not args.input:
            raise UsageError("--mesh needs --input")
        out = draw_mesh(load_image(args.input), read_mesh(args.mesh))
    save_image(out, _output_path(args.output))
    write_run_config(Path(args.output).parent, args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_camera_args(p):
    for k in ("k1", "k2", "k3", "k4"):
        p.add_argument(f"--{k}", type=float, default=0.0,
                       help="published-convention coefficient (pixel_radius profile t - k1 t^3 - ...)")
    p.add_argument("--coeffs", type=float_list, default=None,
                   help="raw profile coefficients c1,c2,... of r = c1 t + c2 t^3 + ...")
    p.add_argument("--focal", type=float, default=128.0)
    p.add_argument("--principal", type=point_arg, default=None, help="u0,v0 (default image centre)")
    p.add_argument("--mode", choices=distortion.RADIAL_MODES, default="pixel_radius")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rectangling", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distort", help="synthesize a wide-angle image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--emit-mask", default=None, help="write the field-of-view mask (P5)")
    _add_camera_args(p)
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("rectify", help="rectify a wide-angle image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--emit-mask", default=None, help="write the valid mask (P5)")
    p.add_argument("--emit-flow", default=None, help="write the rectification flow (.flo)")
    p.add_argument("--size", type=lambda s: parse_pair(s), default=None, help="output WxH")
    _add_camera_args(p)
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("rectangle", help="fit a mesh that fills the rectangle")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--gt", default=None, help="target image; switches to the supervised fit")
    p.add_argument("--grid", type=grid_arg, default=(8, 8), help="cells UxV (8x8 gives 9x9 nodes)")
    p.add_argument("--stages", default="sim,homo,tps")
    p.add_argument("--budgets", type=int_list, default=None, help="iterations per stage")
    p.add_argument("--sigmas", type=float_list, default=[4.0, 2.0, 1.0, 0.0], help="blur schedule (px)")
    p.add_argument("--probe-step", type=int, default=2)
    p.add_argument("--weights", type=float_list, default=None, help="ap,ig,bend")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--emit-mesh", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--emit-flow", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rectangle)

    p = sub.add_parser("gen", help="generate a planted-truth dataset")
    p.add_argument("--stage", required=True, help="SIM4, HOMO8 or RECT")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--src-dir", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=lambda s: parse_pair(s), default=(256, 256))
    p.add_argument("--grid", type=grid_arg, default=(8, 8))
    p.add_argument("--rho", type=float, default=25.0)
    p.add_argument("--principal-jitter", type=float, default=0.0)
    p.add_argument("--corner-shift", type=float_list, default=[8.0, 32.0],
                   help="RECT: allowed inward shift of the outermost node, lo,hi (px)")
    p.add_argument("--min-bow", type=float, default=2.0,
                   help="RECT: minimum bend of each image side (px)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="compare predictions with ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--metrics", type=lambda s: [m.strip() for m in s.split(",") if m.strip()],
                   default=list(_METRICS))
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="render a flow field or a mesh overlay")
    p.add_argument("--flow", default=None)
    p.add_argument("--mesh", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--max-norm", type=float, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_viz)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None, help="JSON file with defaults for any flag")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` with defaults taken from the ``--config`` JSON file, if any."""
    path = _config_path(argv)
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path is None or command not in subparsers:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(k.replace("-", "_") for k in cfg) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        try:
            defaults[dest] = _coerce(value, actions[dest].type)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        actions[dest].required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError, OSError,
            ImageFormatError, MeshFormatError, FlowFormatError, curriculum.ManifestError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OptimizationError as exc:
        print(f"optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except (distortion.NonMonotoneProfileError, distortion.RadialRangeError,
            DegenerateConfigurationError, DegenerateHomographyError,
            curriculum.GenerationError, MaskError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
