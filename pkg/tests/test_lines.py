import numpy as np
import pytest

from conftest import MAP_GRID, box_room, l_room
from panoroom.errors import ExtractionError, FrameError
from panoroom.lines import (EdgeSamples, GreatCircleSegment, Label, RansacConfig, classify_lines,
                           estimate_level_frame, estimate_manhattan_frame, extract_edge_pixels, extract_lines,
                           ransac_great_circles, score_and_prune, segment_pixels)
from panoroom.maps import ProbabilityMap, render_gt_maps
from panoroom.sphere import (EquirectGrid, GreatCircle, ManhattanFrame, bearing_to_pixel, canonical_normal,
                             normalize, pixel_to_bearing)


def gt_segments(model, prob=1.0):
    """One segment per structural edge of ``model``, straight from its world corners."""
    out = []
    for a, b in model.edges_world():
        out.append(GreatCircleSegment(GreatCircle(canonical_normal(np.cross(a, b))), normalize(a), normalize(b),
                                      probability=prob))
    return out


def gt_normals(model):
    return np.array([s.normal for s in gt_segments(model)])


def rotation(axis, angle):
    axis = normalize(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def frame_angle(f, g):
    """Largest angle between matched columns of two frames, up to axis permutation and sign."""
    c = np.abs(f.matrix.T @ g.matrix)
    return float(np.arccos(np.clip(c.max(axis=1).min(), -1.0, 1.0)))


def rotated(segs, r):
    return [GreatCircleSegment(GreatCircle(r @ s.normal), r @ s.start, r @ s.end, probability=s.probability)
            for s in segs]


# -- edge samples --------------------------------------------------------------------

def test_zero_map_gives_no_samples():
    assert len(extract_edge_pixels(ProbabilityMap.zeros(MAP_GRID), 0.5)) == 0


def test_single_pixel_sample():
    vals = np.zeros(MAP_GRID.shape)
    vals[10, 37] = 0.9
    s = extract_edge_pixels(ProbabilityMap(MAP_GRID, vals), 0.5)
    assert len(s) == 1
    assert s.weights[0] == pytest.approx(0.9, abs=1e-7)
    np.testing.assert_allclose(s.bearings[0], pixel_to_bearing(37, 10, MAP_GRID), atol=1e-15)


def test_sample_count_matches_scan(box_maps):
    vals = box_maps[0].values
    count = sum(1 for r in range(vals.shape[0]) for c in range(vals.shape[1]) if vals[r, c] >= 0.25)
    assert len(extract_edge_pixels(box_maps[0], 0.25)) == count


# -- RANSAC ---------------------------------------------------------------------------

def _equator_samples(n=200):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    pts = np.column_stack([np.cos(t), np.sin(t), np.zeros(n)])
    return EdgeSamples(pts, np.ones(n), np.zeros(n, int), np.arange(n))


def test_single_circle_gives_one_segment():
    segs = ransac_great_circles(_equator_samples(), RansacConfig())
    assert len(segs) == 1
    assert np.arccos(min(abs(segs[0].normal @ [0, 0, 1.0]), 1.0)) < 1e-3


def test_too_few_samples():
    with pytest.raises(ExtractionError):
        ransac_great_circles(_equator_samples(3), RansacConfig(min_inliers=4))


def test_clean_box_normals_recovered(box_maps):
    segs = ransac_great_circles(extract_edge_pixels(box_maps[0], 0.1), RansacConfig())
    found = np.array([s.normal for s in segs])
    for n in gt_normals(box_room()):
        assert np.arccos(np.clip(np.abs(found @ n).max(), -1, 1)) <= 2e-2


def test_ransac_deterministic(box_maps):
    samples = extract_edge_pixels(box_maps[0], 0.1)
    a = ransac_great_circles(samples, RansacConfig(seed=5))
    b = ransac_great_circles(samples, RansacConfig(seed=5))
    assert len(a) == len(b)
    for s, t in zip(a, b):
        assert s.normal.tobytes() == t.normal.tobytes()
        assert s.start.tobytes() == t.start.tobytes() and s.end.tobytes() == t.end.tobytes()
        assert np.array_equal(s.inliers, t.inliers)


def test_inliers_disjoint_and_bounded(lroom):
    edge, _ = render_gt_maps(lroom, MAP_GRID)
    samples = extract_edge_pixels(edge, 0.1)
    segs = ransac_great_circles(samples, RansacConfig())
    seen = np.concatenate([s.inliers for s in segs])
    assert len(seen) == len(np.unique(seen))
    assert sum(s.support for s in segs) <= samples.weights.sum() + 1e-9
    for s in segs:
        for p in (s.start, s.end):
            assert abs(p @ s.normal) < 1e-6


# -- Manhattan frame ---------------------------------------------------------------------

def test_frame_of_axis_aligned_room():
    f = estimate_manhattan_frame(gt_segments(l_room()))
    assert frame_angle(f, ManhattanFrame.identity()) <= 1e-2


def test_frame_follows_yaw():
    f = estimate_manhattan_frame(gt_segments(l_room(yaw=np.radians(30))))
    yaw = np.arctan2(f.r1[1], f.r1[0])
    assert abs((yaw - np.radians(30) + np.pi / 4) % (np.pi / 2) - np.pi / 4) <= 1e-2
    assert frame_angle(f, ManhattanFrame.from_yaw(np.radians(30))) <= 1e-2


@pytest.mark.parametrize("seed", range(5))
def test_frame_rotation_equivariance(seed):
    rng = np.random.default_rng(seed)
    r = rotation(rng.normal(size=3), rng.uniform(0, np.pi))
    segs = gt_segments(l_room())
    f0 = estimate_manhattan_frame(segs)
    f1 = estimate_manhattan_frame(rotated(segs, r))
    assert frame_angle(f1, ManhattanFrame(r @ f0.matrix)) <= 1e-2


def test_frame_needs_two_directions():
    s = GreatCircleSegment(GreatCircle(np.array([0, 0, 1.0])), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), probability=1)
    with pytest.raises(FrameError):
        estimate_manhattan_frame([s, s, s, s])


def test_level_frame_from_lines():
    f = estimate_level_frame(gt_segments(box_room(yaw=0.4)))
    assert frame_angle(f, ManhattanFrame.from_yaw(0.4)) <= 1e-6
    vertical_only = [s for s in gt_segments(box_room()) if abs(s.normal[2]) < 1e-9]
    with pytest.raises(FrameError):
        estimate_level_frame(vertical_only)


def test_frame_from_rendered_map():
    room = l_room(yaw=0.5)
    edge, _ = render_gt_maps(room, MAP_GRID)
    res = extract_lines(edge, RansacConfig(max_lines=8), level=False)
    assert frame_angle(res.frame, room.frame) <= 1e-2
    res = extract_lines(edge, RansacConfig(max_lines=8))
    assert frame_angle(res.frame, room.frame) <= 1e-2


# -- labels ------------------------------------------------------------------------------

def test_label_of_horizon_circle():
    f = ManhattanFrame.identity()
    s = GreatCircleSegment(GreatCircle(np.array([0, 0, 1.0])), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    a = classify_lines([s], f)[0].label
    assert a == classify_lines([s], f)[0].label == Label.X


def test_diagonal_circle_is_unassigned():
    f = ManhattanFrame.identity()
    n = normalize([1.0, 1.0, 0.0])
    s = GreatCircleSegment(GreatCircle(n), np.array([0, 0, 1.0]), normalize([1.0, -1.0, 0.2]))
    # the plane holds z, so it is a vertical line unless z is excluded: tilt it off all axes
    tilted = normalize([1.0, 1.0, 1.0])
    t = GreatCircleSegment(GreatCircle(tilted), normalize(np.cross(tilted, [0, 0, 1.0])),
                           normalize(np.cross(tilted, [1.0, 0, 0])))
    assert classify_lines([t], f, np.radians(10))[0].label == Label.UNASSIGNED
    assert classify_lines([s], f, np.radians(10))[0].label == Label.Z


def test_clean_room_labels_match_generator(lroom):
    segs = classify_lines(gt_segments(lroom), lroom.frame)
    n = lroom.n_corners
    poly = lroom.floor_polygon
    for i in range(n):
        d = poly[(i + 1) % n] - poly[i]
        want = Label.X if abs(d[0]) > abs(d[1]) else Label.Y
        assert segs[i].label == want and segs[n + i].label == want
        assert segs[2 * n + i].label == Label.Z


# -- scoring ------------------------------------------------------------------------------

def _arc_oracle(a, b, grid):
    """Rasterise an arc independently: rotate ``a`` towards ``b`` in equal angle steps."""
    a = normalize(a)
    b = normalize(b)
    ang = np.arccos(np.clip(a @ b, -1, 1))
    e2 = normalize(b - (a @ b) * a)
    n = max(int(np.ceil(ang / (0.25 * np.pi / grid.height))), 1) + 1
    t = np.linspace(0.0, ang, n)
    pts = np.cos(t)[:, None] * a + np.sin(t)[:, None] * e2
    lon = np.arctan2(pts[:, 1], pts[:, 0])
    lat = np.arcsin(np.clip(pts[:, 2], -1, 1))
    u = np.mod((lon + np.pi) / (2 * np.pi) * grid.width - 0.5, grid.width)
    v = np.clip((np.pi / 2 - lat) / np.pi * grid.height - 0.5, 0, grid.height - 0.5)
    cols = np.mod(np.floor(u + 0.5).astype(int), grid.width)
    rows = np.clip(np.floor(v + 0.5).astype(int), 0, grid.height - 1)
    return set(zip(rows.tolist(), cols.tolist()))


def test_scores_match_rasteriser_oracle():
    rng = np.random.default_rng(0)
    vals = rng.random(MAP_GRID.shape)
    edge = ProbabilityMap(MAP_GRID, vals)
    segs = []
    for _ in range(20):
        a = normalize(rng.normal(size=3))
        b = normalize(a + 0.8 * normalize(rng.normal(size=3)))
        segs.append(GreatCircleSegment(GreatCircle(canonical_normal(np.cross(a, b))), a, b))
    scored = {id(s): s for s in segs}
    out = score_and_prune(segs, edge)
    assert len(out) == 20
    v32 = edge.values.astype(np.float64)
    for s in out:
        oracle = sum(v32[r, c] for r, c in _arc_oracle(s.start, s.end, MAP_GRID))
        assert s.probability == pytest.approx(oracle, abs=1e-9)
    del scored


def test_constant_map_scores_pixel_count():
    grid = MAP_GRID
    edge = ProbabilityMap(grid, np.full(grid.shape, 0.25))
    a, b = pixel_to_bearing(10.0, 20.0, grid), pixel_to_bearing(40.0, 25.0, grid)
    seg = GreatCircleSegment(GreatCircle(canonical_normal(np.cross(a, b))), a, b)
    k = len(segment_pixels(seg, grid))
    assert score_and_prune([seg], edge)[0].probability == pytest.approx(0.25 * k, abs=1e-9)


def test_zero_lines_pruned(box_maps):
    a, b = pixel_to_bearing(10.0, 20.0, MAP_GRID), pixel_to_bearing(40.0, 25.0, MAP_GRID)
    seg = GreatCircleSegment(GreatCircle(canonical_normal(np.cross(a, b))), a, b)
    assert score_and_prune([seg], ProbabilityMap.zeros(MAP_GRID)) == []
    segs = ransac_great_circles(extract_edge_pixels(box_maps[0], 0.1), RansacConfig())
    pruned = score_and_prune(segs, box_maps[0])
    assert len(pruned) <= len(segs) and all(s.probability > 0 for s in pruned)
