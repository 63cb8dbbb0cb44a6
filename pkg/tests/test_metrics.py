"""3D IoU, corner error, segmentation rendering, pixel error and CSV reports."""
from __future__ import annotations

import csv
import io
import itertools

import numpy as np
import pytest

from conftest import box_room, l_room
from panoroom import kernels
from panoroom.errors import MetricError
from panoroom.layout import LayoutModel
from panoroom.metrics import (CSV_HEADER, EvalReport, Scheme, SegmentationMap, corner_error, corner_error_pixels,
                              evaluate, iou_3d, mean_report, pixel_error, render_segmentation, reports_csv,
                              world_polygon)
from panoroom.sphere import EquirectGrid, ManhattanFrame
from panoroom.synth import RoomSpec, sample_room

GRID = EquirectGrid(128, 64)


def _rect(x0, x1, y0, y1, floor=-1.0, ceiling=1.0, yaw=0.0):
    poly = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    return LayoutModel(np.array(poly, dtype=float), floor, ceiling, ManhattanFrame.from_yaw(yaw))


def _random_pair(rng):
    a = sample_room(RoomSpec(int(rng.choice([4, 6, 8])), seed=int(rng.integers(1 << 30))))
    b = sample_room(RoomSpec(int(rng.choice([4, 6, 8])), seed=int(rng.integers(1 << 30))))
    return a, b


def _rotated(model, yaw):
    return LayoutModel(model.floor_polygon, model.floor_z, model.ceiling_z,
                       ManhattanFrame(ManhattanFrame.from_yaw(yaw).matrix @ model.frame.matrix))


# -- independent oracles ---------------------------------------------------------------------

def _inside(x, y, poly):
    """Even-odd rule, vectorised over points."""
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > y) != (y2 > y)
        xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def voxel_iou(a: LayoutModel, b: LayoutModel, n: int = 160) -> float:
    """Count voxel centres of an ``n^3`` box around both rooms; prisms make the count separable."""
    pa, pb = world_polygon(a), world_polygon(b)
    both = np.vstack([pa, pb])
    lo, hi = both.min(axis=0), both.max(axis=0)
    z0, z1 = min(a.floor_z, b.floor_z), max(a.ceiling_z, b.ceiling_z)
    xs = lo[0] + (np.arange(n) + 0.5) * (hi[0] - lo[0]) / n
    ys = lo[1] + (np.arange(n) + 0.5) * (hi[1] - lo[1]) / n
    zs = z0 + (np.arange(n) + 0.5) * (z1 - z0) / n
    x, y = np.meshgrid(xs, ys, indexing="ij")
    plan_a, plan_b = _inside(x, y, pa).ravel(), _inside(x, y, pb).ravel()
    col_a = (zs >= a.floor_z) & (zs <= a.ceiling_z)
    col_b = (zs >= b.floor_z) & (zs <= b.ceiling_z)
    in_a = plan_a[:, None] & col_a[None, :]
    in_b = plan_b[:, None] & col_b[None, :]
    return np.count_nonzero(in_a & in_b) / np.count_nonzero(in_a | in_b)


def brute_corner_error(p, g, grid):
    """Try every pairing; the smaller set is padded with corners that cost one diagonal."""
    p, g = np.asarray(p, float), np.asarray(g, float)
    diag = np.hypot(grid.width, grid.height)
    n = max(len(p), len(g))
    cost = np.full((n, n), diag)
    for i in range(len(p)):
        for j in range(len(g)):
            du = abs(p[i, 0] - g[j, 0])
            du = min(du, grid.width - du)
            cost[i, j] = min(np.hypot(du, p[i, 1] - g[j, 1]), diag)
    perms = np.array(list(itertools.permutations(range(n))))
    best = cost[np.arange(n), perms].sum(axis=1).min()
    return best / n / diag * 100.0


# -- 3D IoU ------------------------------------------------------------------------------------

def test_iou_identity():
    m = box_room()
    assert iou_3d(m, m) == pytest.approx(1.0, abs=1e-12)


def test_iou_half_overlapping_rectangles():
    # two 2 x 2 plans offset by half their width, shifted so the camera sits inside both
    a = _rect(-1.5, 0.5, -1.0, 1.0)
    b = _rect(-0.5, 1.5, -1.0, 1.0)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou_height_overlap():
    a = _rect(-1, 1, -1, 1, floor=-1.0, ceiling=1.0)
    b = _rect(-1, 1, -1, 1, floor=-1.0, ceiling=3.0)
    assert iou_3d(a, b) == pytest.approx(0.5, abs=1e-12)


def test_iou_matches_voxel_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = _random_pair(rng)
        assert abs(iou_3d(a, b) - voxel_iou(a, b)) <= 1.5e-2


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(12)
    for _ in range(500):
        a, b = _random_pair(rng)
        ab, ba = iou_3d(a, b), iou_3d(b, a)
        assert abs(ab - ba) <= 1e-12
        assert 0.0 <= ab <= 1.0


def test_iou_one_only_for_equal_rooms():
    m = l_room()
    moved = LayoutModel(m.floor_polygon + [1e-3, 0.0], m.floor_z, m.ceiling_z, m.frame)
    assert iou_3d(m, moved) < 1.0


def test_iou_invariant_to_common_yaw():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a, b = _random_pair(rng)
        yaw = rng.uniform(-np.pi, np.pi)
        assert abs(iou_3d(_rotated(a, yaw), _rotated(b, yaw)) - iou_3d(a, b)) <= 1e-9


def test_iou_invariant_to_common_translation():
    a = _rect(-1.5, 0.5, -1.0, 1.0)
    b = _rect(-0.5, 1.5, -1.0, 1.5)
    t = np.array([0.2, -0.3])
    ta = LayoutModel(a.floor_polygon + t, a.floor_z, a.ceiling_z, a.frame)
    tb = LayoutModel(b.floor_polygon + t, b.floor_z, b.ceiling_z, b.frame)
    assert abs(iou_3d(ta, tb) - iou_3d(a, b)) <= 1e-9


def test_degenerate_room_rejected():
    flat = LayoutModel(np.array([[-1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]), -1.0, 1.0)
    with pytest.raises(MetricError):
        iou_3d(flat, box_room())


# -- corner error ------------------------------------------------------------------------------

def test_corner_error_identity():
    m = l_room()
    assert corner_error(m, m) == 0.0


def test_one_corner_off_by_a_diagonal():
    g = np.column_stack([np.linspace(10, 120, 8), np.full(8, 30.0)])
    p = g.copy()
    p[3] += [GRID.width, GRID.height]
    assert corner_error_pixels(p, g, GRID, wrap=False) == pytest.approx(12.5, abs=1e-12)


def test_corner_error_matches_brute_force():
    rng = np.random.default_rng(14)
    for _ in range(60):
        ng, npred = rng.choice([4, 6, 8], size=2)
        g = np.column_stack([rng.uniform(0, GRID.width, ng), rng.uniform(0, GRID.height, ng)])
        p = np.column_stack([rng.uniform(0, GRID.width, npred), rng.uniform(0, GRID.height, npred)])
        k = min(ng, npred)
        p[:k] = np.column_stack([np.mod(g[:k, 0] + rng.normal(0, 3, k), GRID.width),
                                 np.clip(g[:k, 1] + rng.normal(0, 3, k), 0, GRID.height - 1)])
        assert corner_error_pixels(p, g, GRID) == pytest.approx(brute_corner_error(p, g, GRID), rel=1e-12, abs=1e-12)


def test_corner_error_on_rooms_matches_brute_force():
    # four-wall rooms project eight corners, the largest set the oracle enumerates
    for seed in range(20):
        a = sample_room(RoomSpec(4, seed=seed))
        b = sample_room(RoomSpec(4, seed=1000 + seed))
        expect = brute_corner_error(a.corner_pixels(GRID), b.corner_pixels(GRID), GRID)
        assert corner_error(a, b, GRID) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_corner_error_ignores_order():
    rng = np.random.default_rng(16)
    g = rng.uniform(0, 60, size=(8, 2))
    p = g + rng.normal(0, 2, size=g.shape)
    base = corner_error_pixels(p, g, GRID)
    assert corner_error_pixels(p[rng.permutation(8)], g, GRID) == pytest.approx(base, abs=1e-12)


# -- segmentation ------------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", [Scheme.SS, Scheme.CS])
def test_segmentation_covers_every_surface(scheme):
    m = l_room(yaw=0.3)
    seg = render_segmentation(m, GRID, scheme)
    labels = seg.labels
    assert labels.shape == GRID.shape and labels.min() >= 0
    assert {0, 1, 2} <= set(np.unique(labels).tolist())
    if scheme is Scheme.SS:
        assert labels.max() == 2
    else:
        assert set(np.unique(labels[labels >= 2]).tolist()) == set(range(2, 2 + m.n_corners))


def test_wall_floor_boundary_row():
    hx, hy, cam = 2.0, 1.5, 1.3
    m = _rect(-hx, hx, -hy, hy, floor=-cam, ceiling=1.0)
    labels = render_segmentation(m, GRID).labels
    for azimuth, dist in ((0.0, hx), (np.pi / 2, hy), (np.pi, hx), (-np.pi / 2, hy)):
        col = int(round((azimuth + np.pi) / (2 * np.pi) * GRID.width - 0.5)) % GRID.width
        below = -np.arctan2(cam, dist)
        expect = (np.pi / 2 - below) / np.pi * GRID.height - 0.5
        first_floor = int(np.argmax(labels[:, col] == 1))
        assert abs(first_floor - expect) <= 1.0


def test_quarter_turn_shifts_columns():
    m = l_room()
    a = render_segmentation(m, GRID).labels
    b = render_segmentation(_rotated(m, np.pi / 2), GRID).labels
    assert np.array_equal(np.roll(a, GRID.width // 4, axis=1), b)


def test_cs_walls_numbered_by_first_column():
    labels = render_segmentation(l_room(), GRID, Scheme.CS).labels
    first = [int(np.argmax((labels == k).any(axis=0))) for k in range(2, 8)]
    assert first == sorted(first)


def test_segmentation_label_shape_checked():
    with pytest.raises(MetricError):
        SegmentationMap(GRID, np.zeros((3, 3)))


# -- pixel error -------------------------------------------------------------------------------

def test_pixel_error_identity():
    for grid in (EquirectGrid(64, 32), GRID, EquirectGrid(256, 128)):
        for scheme in Scheme:
            s = render_segmentation(l_room(), grid, scheme)
            assert pixel_error(s, s) == 0.0


def test_quarter_of_pixels_differ():
    a = np.zeros(GRID.shape, dtype=int)
    b = a.copy()
    b[:, :GRID.width // 4] = 2
    pa, pb = SegmentationMap(GRID, a), SegmentationMap(GRID, b)
    assert pixel_error(pa, pb) == 25.0 and pixel_error(pb, pa) == 25.0


def test_cs_relabelled_walls_match():
    gt = render_segmentation(box_room(), GRID, Scheme.CS)
    lab = gt.labels.copy()
    walls = lab >= 2
    lab[walls] = (lab[walls] - 2 + 1) % 4 + 2
    assert not np.array_equal(lab, gt.labels)
    assert pixel_error(SegmentationMap(GRID, lab, Scheme.CS), gt) == 0.0


def test_cs_extra_wall_counts_fully():
    gt = render_segmentation(box_room(), GRID, Scheme.CS)
    lab = gt.labels.copy()
    lab[lab == 2] = 9
    lab[lab == 3] = 9
    err = pixel_error(SegmentationMap(GRID, lab, Scheme.CS), gt)
    smaller = min(np.count_nonzero(gt.labels == 2), np.count_nonzero(gt.labels == 3))
    assert err == pytest.approx(100.0 * smaller / lab.size)


def test_scheme_mismatch_rejected():
    m = box_room()
    with pytest.raises(MetricError):
        pixel_error(render_segmentation(m, GRID, Scheme.SS), render_segmentation(m, GRID, Scheme.CS))


def test_grid_mismatch_rejected():
    m = box_room()
    with pytest.raises(MetricError):
        pixel_error(render_segmentation(m, GRID), render_segmentation(m, EquirectGrid(64, 32)))


def test_ss_pixel_error_symmetric():
    a = render_segmentation(box_room(), GRID)
    b = render_segmentation(l_room(), GRID)
    assert pixel_error(a, b) == pixel_error(b, a)


def test_ray_casting_backends_agree():
    from panoroom.sphere import grid_bearings
    m = l_room()
    rays = np.ascontiguousarray(grid_bearings(GRID))
    args = (rays, np.ascontiguousarray(m.floor_polygon), m.floor_z, m.ceiling_z)
    assert np.array_equal(kernels.cast_room_rays_numpy(*args), kernels.cast_room_rays_numba(*args))


# -- reports ---------------------------------------------------------------------------------

def test_evaluate_identity_and_failure():
    m = l_room()
    r = evaluate(m, m, GRID)
    assert r == EvalReport(1.0, 0.0, 0.0, 0.0)
    assert evaluate(None, m, GRID) == EvalReport.failure()


def test_csv_mean_row():
    rng = np.random.default_rng(17)
    rows = [(f"room_{i:05d}", EvalReport(*rng.uniform(0, 1, 4))) for i in range(7)]
    text = reports_csv(rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert tuple(parsed[0]) == CSV_HEADER
    assert len(parsed) == len(rows) + 2 and parsed[-1][0] == "mean"
    body = np.array([[float(x) for x in r[1:]] for r in parsed[1:-1]])
    mean = np.array([float(x) for x in parsed[-1][1:]])
    np.testing.assert_allclose(mean, body.mean(axis=0), rtol=0, atol=1e-12)


def test_mean_of_nothing_rejected():
    with pytest.raises(MetricError):
        mean_report([])
