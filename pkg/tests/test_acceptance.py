"""End-to-end acceptance checks, one test per criterion.

Fits are cached per module so later criteria reuse earlier results.  Each
test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from rectangling import curriculum as cur
from rectangling import distortion as dist
from rectangling import tps
from rectangling.mesh import (
    foldover_count,
    intergrid_loss,
    intergrid_loss_and_grad,
    regular_grid,
)
from rectangling.metrics import mesh_rmse, psnr
from rectangling.rectangler import (
    BendingQuadratic,
    StagePlan,
    fit_supervised,
    gradient_check,
    reconstruct,
)

from conftest import integral_oracle, record_criterion, smooth_image

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SIZE = (256, 256)
GRID = (8, 8)
N_ITEMS = 20
RECT_SEED = 11
FULL_PLAN = StagePlan.from_names("sim,homo,tps")
TPS_ONLY = StagePlan.from_names("tps", (FULL_PLAN.total_budget,))


def enumerate_loss(g):
    rows, cols = g.shape[:2]
    vals = []
    triples = [(g[r, c], g[r, c + 1], g[r, c + 2]) for r in range(rows) for c in range(cols - 2)]
    triples += [(g[r, c], g[r + 1, c], g[r + 2, c]) for c in range(cols) for r in range(rows - 2)]
    for p0, p1, p2 in triples:
        e1, e2 = p1 - p0, p2 - p1
        vals.append(1.0 - float(e1 @ e2) / (math.hypot(*e1) * math.hypot(*e2)))
    return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# Shared runs


def run_round_trips(seed=5):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(N_ITEMS):
        img = smooth_image(SIZE, sigma=3.0, seed=1000 + i)
        params, _, _ = cur.draw_distortion(SIZE, cur.DistortionRanges(), rng)
        wide, wide_mask = dist.synthesize_with_mask(img, params)
        back, mask = dist.rectify_image(wide, params, src_mask=wide_mask)
        out.append((params, back, mask, psnr(back, img, mask)))
    return out


def run_similarity(seed=6):
    out = []
    for i in range(N_ITEMS):
        rng = cur.item_rng(seed, i)
        pair = cur.gen_similarity_pair(cur.synthetic_source(SIZE, rng), None, rng, GRID)
        res = fit_supervised(pair.input, pair.mask, pair.gt, GRID, plan=StagePlan.from_names("sim"))
        out.append((pair, res))
    return out


def run_homography(seed=3, rho=25.0):
    out = []
    for i in range(N_ITEMS):
        rng = cur.item_rng(seed, i)
        pair = cur.gen_homography_pair(cur.synthetic_source(SIZE, rng), rho, rng, GRID)
        res = fit_supervised(pair.input, pair.mask, pair.gt, GRID, plan=StagePlan.from_names("sim,homo"))
        out.append((pair, res))
    return out


def rect_items():
    spec = cur.CurriculumSpec("RECT", N_ITEMS, seed=RECT_SEED, size=SIZE, grid=GRID)
    return [cur.generate_item(spec, i)[0] for i in range(N_ITEMS)]


def run_rect(pairs, plan=FULL_PLAN, grid=GRID):
    out = []
    for pair in pairs:
        t0 = time.perf_counter()
        res = fit_supervised(pair.input, pair.mask, pair.gt, grid, plan=plan)
        elapsed = time.perf_counter() - t0
        img, m = reconstruct(pair.input, pair.mask, res)
        out.append({"res": res, "seconds": elapsed, "image": img, "mask": m,
                    "psnr": psnr(img, pair.gt, m)})
    return out


@pytest.fixture(scope="module")
def round_trips():
    t0 = time.perf_counter()
    runs = run_round_trips()
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def similarity_runs():
    return run_similarity()


@pytest.fixture(scope="module")
def homography_runs():
    return run_homography()


@pytest.fixture(scope="module")
def rect_pairs():
    return rect_items()


@pytest.fixture(scope="module")
def rect_runs(rect_pairs):
    return run_rect(rect_pairs)


# ---------------------------------------------------------------------------
# Criteria


def test_01_tps_exactness():
    rng = np.random.default_rng(1)
    worst_px = worst_norm = 0.0
    done = 0
    t0 = time.perf_counter()
    while done < 1000:
        n = int(rng.integers(3, 82))
        src = rng.uniform(0, 255, (n, 2))
        dst = src + rng.normal(0, 8, (n, 2))
        try:
            t = tps.solve(tps.ControlPointSet(src, dst))
        except tps.DegenerateConfigurationError:
            continue
        err = float(np.max(np.abs(tps.evaluate(t, src) - dst)))
        worst_px = max(worst_px, err)
        worst_norm = max(worst_norm, err / t.scale)
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst_norm <= 1e-9 and elapsed < 10.0
    record_criterion(1, "TPS exactness", ok,
                     f"max error {worst_norm:.2e} normalised ({worst_px:.2e} px), {elapsed:.2f} s for 1000 sets")
    assert ok


def test_02_affine_reproduction():
    rng = np.random.default_rng(2)
    g = regular_grid(8, 8, *SIZE)
    worst_w = worst_e = 0.0
    for _ in range(100):
        while True:
            M = np.eye(2) + rng.uniform(-0.4, 0.4, (2, 2))
            if abs(np.linalg.det(M)) > 0.1:
                break
        t = tps.solve(tps.ControlPointSet(g.points, g.points @ M.T + rng.uniform(-20, 20, 2)))
        worst_w = max(worst_w, float(np.max(np.abs(t.weights))))
        worst_e = max(worst_e, tps.bending_energy(t))
    ok = worst_w <= 1e-8 and worst_e <= 1e-9
    record_criterion(2, "affine reproduction", ok, f"max |w| {worst_w:.2e}, max bending {worst_e:.2e} (100 maps)")
    assert ok


def test_03_bending_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        U = int(rng.integers(2, 5))
        g = regular_grid(U, U, *SIZE)
        dst = g.points.copy()
        k = int(rng.integers(g.n))
        dst[k] += rng.normal(0, 6, 2)
        t = tps.solve(tps.ControlPointSet(g.points, dst))
        closed = tps.bending_integral(t)
        numeric = integral_oracle(t)
        worst = max(worst, abs(closed - numeric) / numeric)
    ok = worst <= 0.05
    record_criterion(3, "bending-energy oracle", ok, f"max relative gap {worst:.2%} over 20 cases")
    assert ok


def test_04_intergrid_oracle():
    rng = np.random.default_rng(4)
    worst_enum = worst_inv = 0.0
    for _ in range(50):
        rows, cols = (int(v) for v in rng.integers(3, 10, 2))
        g = regular_grid(rows - 1, cols - 1, 200, 150)
        m = g.with_points(g.points + rng.normal(0, 4, g.points.shape))
        v = intergrid_loss(m)
        worst_enum = max(worst_enum, abs(v - enumerate_loss(m.grid)))
        a, s = rng.uniform(-np.pi, np.pi), rng.uniform(0.3, 3.0)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        moved = m.with_points(s * m.points @ R.T + rng.uniform(-100, 100, 2))
        worst_inv = max(worst_inv, abs(intergrid_loss(moved) - v))
    regular = max(intergrid_loss(regular_grid(u, v, 256, 200)) for u in range(1, 9) for v in range(1, 9))
    ok = worst_enum <= 1e-12 and worst_inv <= 1e-12 and regular == 0.0
    record_criterion(4, "inter-grid oracle", ok,
                     f"enumeration gap {worst_enum:.1e}, similarity gap {worst_inv:.1e}, regular grids {regular}")
    assert ok


def test_05_distortion_round_trip(round_trips):
    runs, elapsed = round_trips
    worst = min(r[3] for r in runs)
    ok = worst >= 35.0 and elapsed < 60.0
    record_criterion(5, "distortion round trip", ok,
                     f"min masked PSNR {worst:.2f} dB over {len(runs)} images, {elapsed:.1f} s")
    assert ok


def test_06_similarity_recovery(similarity_runs):
    ds = dr = dt = 0.0
    for pair, res in similarity_runs:
        got, want = res.similarity, pair.params
        ds = max(ds, abs(got["scale"] - want["scale"]))
        dr = max(dr, abs(got["rotation"] - want["rotation"]))
        dt = max(dt, float(np.max(np.abs(np.subtract(got["translation"], want["translation"])))))
    ok = ds <= 1e-2 and dr <= 1e-2 and dt <= 0.2
    record_criterion(6, "planted-similarity recovery", ok,
                     f"max errors scale {ds:.1e}, rotation {dr:.1e} rad, translation {dt:.1e} px")
    assert ok


def test_07_homography_recovery(homography_runs):
    worst = 0.0
    for pair, res in homography_runs:
        err = np.linalg.norm(np.asarray(res.corners) - np.asarray(pair.params["corners"]), axis=1)
        worst = max(worst, float(err.max()))
    ok = worst <= 0.5
    record_criterion(7, "planted-homography recovery", ok, f"max corner error {worst:.3f} px (rho = 25)")
    assert ok


def test_08_mesh_recovery(rect_pairs, rect_runs):
    rmse = [mesh_rmse(r["res"].src_mesh, p.mesh) for p, r in zip(rect_pairs, rect_runs)]
    ps = [r["psnr"] for r in rect_runs]
    secs = [r["seconds"] for r in rect_runs]
    folds = sum(foldover_count(r["res"].src_mesh) for r in rect_runs)
    ok = max(rmse) <= 1.5 and min(ps) >= 30.0 and max(secs) < 120.0
    record_criterion(8, "planted-mesh recovery", ok,
                     f"max mesh RMSE {max(rmse):.3f} px, min PSNR {min(ps):.2f} dB, "
                     f"max {max(secs):.1f} s/item, {folds} foldovers")
    assert ok
    assert folds == 0


def test_09_curriculum_benefit(rect_pairs, rect_runs):
    # Final energies are only defined to the optimiser's termination precision.
    # Measure it: how far the staged result moves when its budget shrinks by 10%.
    # Gaps below the worst such shift count as equal.
    short = StagePlan.from_names("sim,homo,tps", tuple(int(b * 0.9) for b in FULL_PLAN.budgets))
    floor = 0.0
    for pair, staged in zip(rect_pairs, rect_runs):
        e_short = fit_supervised(pair.input, pair.mask, pair.gt, GRID, plan=short).energy.total
        e_full = staged["res"].energy.total
        floor = max(floor, abs(e_short - e_full) / e_full)
    tps_only = run_rect(rect_pairs, TPS_ONLY)
    gaps = []
    for staged, flat in zip(rect_runs, tps_only):
        a, b = staged["res"].energy.total, flat["res"].energy.total
        gaps.append((a - b) / b)
    gaps = np.array(gaps)
    lower = int(np.sum(gaps < -floor))
    equal = int(np.sum(np.abs(gaps) <= floor))
    strict = int(np.sum(gaps <= 0))
    ok = lower + equal >= math.ceil(0.8 * N_ITEMS)
    record_criterion(9, "curriculum benefit", ok,
                     f"staged lower in {lower}, equal in {equal} of {N_ITEMS} items "
                     f"(tie band {floor:.1e} from a 10% budget change); strictly <= in {strict}; "
                     f"relative gaps {gaps.min():+.1e} .. {gaps.max():+.1e}")
    assert ok


def test_10_grid_size_trend(rect_pairs, rect_runs):
    means = {}
    for grid in ((2, 2), (4, 4)):
        means[grid] = float(np.mean([r["psnr"] for r in run_rect(rect_pairs, grid=grid)]))
    means[GRID] = float(np.mean([r["psnr"] for r in rect_runs]))
    seq = [means[(2, 2)], means[(4, 4)], means[GRID]]
    ok = seq[0] <= seq[1] <= seq[2]
    record_criterion(10, "grid-size trend", ok,
                     "mean PSNR 3x3 {:.2f} / 5x5 {:.2f} / 9x9 {:.2f} dB".format(*seq))
    assert ok


def test_11_gradient_checks():
    rng = np.random.default_rng(11)
    worst_ig = worst_bend = 0.0
    g = regular_grid(8, 8, *SIZE)
    bend = BendingQuadratic(g.points)
    shape = g.grid.shape
    for _ in range(50):
        x = g.points + rng.normal(0, 4, g.points.shape)
        worst_ig = max(worst_ig, gradient_check(
            lambda v: intergrid_loss_and_grad(v.reshape(shape), with_grad=False)[0],
            lambda v: intergrid_loss_and_grad(v.reshape(shape))[1].ravel(),
            x.ravel(), seed=int(rng.integers(1 << 30))))
        worst_bend = max(worst_bend, gradient_check(bend.energy, bend.gradient, x,
                                                    seed=int(rng.integers(1 << 30))))
    ok = worst_ig <= 1e-4 and worst_bend <= 1e-4
    record_criterion(11, "gradient checks", ok,
                     f"max relative error inter-grid {worst_ig:.1e}, bending {worst_bend:.1e} (50 points)")
    assert ok


def test_12_determinism(round_trips, similarity_runs, homography_runs, rect_pairs, rect_runs):
    same = True
    for a, b in zip(round_trips[0], run_round_trips()):
        same &= a[0].k == b[0].k and a[1] == b[1] and a[2] == b[2]
    for (pa, ra), (pb, rb) in zip(similarity_runs, run_similarity()):
        same &= pa.input == pb.input and ra.src_mesh == rb.src_mesh
    for (pa, ra), (pb, rb) in zip(homography_runs, run_homography()):
        same &= pa.input == pb.input and ra.src_mesh == rb.src_mesh
    again_pairs = rect_items()
    for pa, pb in zip(rect_pairs, again_pairs):
        same &= pa.input == pb.input and pa.mask == pb.mask and pa.mesh == pb.mesh
    for ra, rb in zip(rect_runs, run_rect(again_pairs)):
        same &= ra["res"].src_mesh == rb["res"].src_mesh and ra["image"] == rb["image"]
    record_criterion(12, "determinism", same,
                     "criteria 5-8 rerun: meshes and images bitwise " + ("identical" if same else "DIFFERENT"))
    assert same
