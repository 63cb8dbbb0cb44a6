"""Structural line extraction: RANSAC great circles, Manhattan frame, labels, scores."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import DegenerateFitError, ExtractionError, FrameError
from .maps import ProbabilityMap, arc_pixels, as_array
from .sphere import (EquirectGrid, GreatCircle, ManhattanFrame, bearing_to_pixel, canonical_normal,
                     fit_great_circle, grid_bearings, normalize, pixel_to_bearing, rotation_z)


class Label(enum.IntEnum):
    X = 0
    Y = 1
    Z = 2
    UNASSIGNED = 3


@dataclass(frozen=True)
class EdgeSamples:
    """Edge pixels above threshold, as bearings with their map values as weights."""

    bearings: np.ndarray
    weights: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    # local maxima across the band (see ridge_mask); None means "all samples"
    ridge: np.ndarray | None = None
    # sub-pixel band centres of the ridge samples (pixel centres elsewhere); None means "bearings"
    peaks: np.ndarray | None = None

    def ridge_points(self) -> np.ndarray:
        return self.bearings if self.peaks is None else self.peaks

    def __len__(self):
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class GreatCircleSegment:
    """Arc of a great circle between ``start`` and ``end`` (the shorter way)."""

    circle: GreatCircle
    start: np.ndarray
    end: np.ndarray
    label: Label = Label.UNASSIGNED
    probability: float = 0.0
    support: float = 0.0
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def normal(self) -> np.ndarray:
        return self.circle.normal

    @property
    def length(self) -> float:
        return float(np.arccos(np.clip(self.start @ self.end, -1.0, 1.0)))

    def midpoint(self) -> np.ndarray:
        return normalize(self.start + self.end) if self.length < np.pi - 1e-9 else self.start

    def arc_position(self, p) -> np.ndarray:
        """Signed angle of ``p`` (projected on the circle) from ``start`` towards ``end``."""
        n = self.normal
        e2 = np.cross(n, self.start)
        direction = 1.0 if self.end @ e2 >= 0 else -1.0
        p = np.asarray(p, dtype=np.float64)
        return direction * np.arctan2(p @ e2, p @ self.start)

    def contains(self, p, slack: float = 0.0) -> np.ndarray:
        a = self.arc_position(p)
        return (a >= -slack) & (a <= self.length + slack)

    def sort_key(self) -> tuple:
        return tuple(self.normal)


@dataclass(frozen=True)
class RansacConfig:
    """Sequential great-circle RANSAC settings.

    Angles are in radians.  ``min_inliers`` is a weighted count (the sum of
    the map values of the core inliers).
    """

    seed: int = 0
    max_iterations: int = 200
    inlier_tol_rad: float = 0.03
    min_inliers: float = 3.0
    max_lines: int = 40
    edge_threshold: float = 0.1
    # samples this close to an accepted segment are removed from the pool
    band_tol_rad: float = 0.05
    # a gap wider than this along the circle splits the inliers into two segments
    max_gap_rad: float = 0.15
    # second sample of each minimal set is drawn at this angular distance from the first
    pair_min_rad: float = 0.12
    pair_max_rad: float = 0.5
    local_refits: int = 8
    # best-scoring raw hypotheses that get polished each round
    polish_candidates: int = 2
    run_candidates: int = 15
    # run ends excluded from the band refit, where other structure joins
    trim_rad: float = 0.03
    # vote bin width of the vanishing-direction sweep, and the cone around each
    # vanishing point whose samples do not vote (their plane is ill-defined)
    sweep_bin_rad: float = 0.004
    vp_exclusion_rad: float = 0.15
    # rounds whose best run is too light before giving up
    max_failures: int = 3
    weighted: bool = True

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_lines < 1 or self.min_inliers <= 0:
            raise ValueError("iteration, line and inlier counts must be positive")
        if self.inlier_tol_rad <= 0 or self.band_tol_rad <= 0 or self.max_gap_rad <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.edge_threshold < 1.0:
            raise ValueError("edge_threshold must lie in (0, 1)")


def extract_edge_pixels(edge, threshold: float) -> EdgeSamples:
    """All pixels with value ``>= threshold``, row-major, bearings at pixel centres."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    vals = as_array(edge)
    grid = edge.grid if isinstance(edge, ProbabilityMap) else EquirectGrid(vals.shape[1], vals.shape[0])
    rows, cols = np.nonzero(vals >= threshold)
    bearings = grid_bearings(grid)[rows, cols]
    ridge = ridge_mask(vals)[rows, cols]
    du, dv = subpixel_offsets(vals, rows, cols)
    du = np.where(ridge, du, 0.0)
    dv = np.where(ridge, dv, 0.0)
    peaks = pixel_to_bearing(np.mod(cols + du, grid.width), np.clip(rows + dv, 0.0, grid.height - 1e-9), grid)
    return EdgeSamples(np.ascontiguousarray(bearings), vals[rows, cols], rows, cols, ridge,
                       np.ascontiguousarray(peaks))


def _peak_offset(a, c, b):
    """Vertex offset in ``[-0.5, 0.5]`` of a Gaussian (log-parabola) through three samples, and its sharpness."""
    with np.errstate(divide="ignore", invalid="ignore"):
        la, lc, lb = np.log(a), np.log(c), np.log(b)
        curv = la - 2 * lc + lb
        off = 0.5 * (la - lb) / curv
    ok = (a > 0) & (b > 0) & (curv < 0) & np.isfinite(off)
    return np.where(ok, np.clip(off, -0.5, 0.5), 0.0), np.where(ok, -curv, 0.0)


def subpixel_offsets(vals: np.ndarray, rows, cols) -> tuple[np.ndarray, np.ndarray]:
    """Sub-pixel shift ``(du, dv)`` of the band centre at each pixel.

    Only one axis moves: the one across which the profile is sharper,
    which is the axis more nearly perpendicular to the line.
    """
    h, w = vals.shape
    c = vals[rows, cols]
    left, right = vals[rows, (cols - 1) % w], vals[rows, (cols + 1) % w]
    up, down = vals[np.maximum(rows - 1, 0), cols], vals[np.minimum(rows + 1, h - 1), cols]
    du, su = _peak_offset(left, c, right)
    dv, sv = _peak_offset(up, c, down)
    horiz = su >= sv
    return np.where(horiz, du, 0.0), np.where(horiz, 0.0, dv)


def ridge_mask(vals: np.ndarray) -> np.ndarray:
    """Pixels that are a local maximum horizontally or vertically (columns wrap)."""
    left = np.roll(vals, 1, axis=1)
    right = np.roll(vals, -1, axis=1)
    up = np.vstack([vals[:1], vals[:-1]])
    down = np.vstack([vals[1:], vals[-1:]])
    horiz = (vals >= left) & (vals >= right) & ((vals > left) | (vals > right))
    vert = (vals >= up) & (vals >= down) & ((vals > up) | (vals > down))
    return (horiz | vert) & (vals > 0)


# -- sequential RANSAC ------------------------------------------------------------

def _circle_basis(n):
    return GreatCircle(n).basis()


def _largest_cluster(angles, weights, max_gap, anchor=None):
    """Indices (into ``angles``) of the heaviest run whose consecutive gaps are <= ``max_gap``.

    With an ``anchor`` angle the run nearest to it is taken instead.
    """
    order = np.argsort(angles, kind="stable")
    a = angles[order]
    gaps = np.diff(np.concatenate([a, a[:1] + 2 * np.pi]))
    # start the circular scan just after the widest gap
    start = (int(np.argmax(gaps)) + 1) % len(a)
    order = np.roll(order, -start)
    gaps = np.roll(gaps, -start)[:-1]
    breaks = np.flatnonzero(gaps > max_gap) + 1
    runs = np.split(np.arange(len(order)), breaks)
    if anchor is not None:
        def dist(r):
            d = np.abs(np.mod(angles[order[r]] - anchor + np.pi, 2 * np.pi) - np.pi)
            return (float(d.min()), -weights[order[r]].sum(), r[0])
        return order[min(runs, key=dist)]
    best = max(runs, key=lambda r: (weights[order[r]].sum(), -r[0]))
    return order[best]


def _support(normal, pts, w, sin_tol):
    return float(kernels.circle_support(normal[None, :], pts, w, sin_tol)[0])


def _run_range(normal, pts, w, cfg: RansacConfig, anchor=None):
    """Core inliers forming the heaviest contiguous run along the circle.

    Given an ``anchor`` bearing, the run closest to it is taken instead, so
    a refit keeps following the same stretch of line.  Returns ``(core_idx, e1, e2, a0, a1)`` with the run spanning angles
    ``[a0, a1]`` in the circle basis ``(e1, e2)``, or ``None``.
    """
    sin_tol = np.sin(cfg.inlier_tol_rad)
    core = np.flatnonzero(np.abs(pts @ normal) <= sin_tol)
    if len(core) < 2:
        return None
    e1, e2 = _circle_basis(normal)
    ang = np.arctan2(pts[core] @ e2, pts[core] @ e1)
    anchor_ang = None if anchor is None else float(np.arctan2(anchor @ e2, anchor @ e1))
    keep = _largest_cluster(ang, w[core], cfg.max_gap_rad, anchor_ang)
    if len(keep) < 2:
        return None
    a = ang[keep]
    ref = a[np.argmax(w[core[keep]])]
    rel = np.mod(a - ref + np.pi, 2 * np.pi) - np.pi
    return core[keep], e1, e2, ref + rel.min(), ref + rel.max()


def _in_range(pts, e1, e2, a0, a1):
    mid = 0.5 * (a0 + a1)
    ang = np.arctan2(pts @ e2, pts @ e1)
    return np.abs(np.mod(ang - mid + np.pi, 2 * np.pi) - np.pi) <= 0.5 * (a1 - a0)


def _polish(normal, ridge_pts, ridge_w, cfg: RansacConfig):
    """Pull a rough circle onto the line it sits on.

    Each pass takes the run of ridge inliers, drops its two ends (where
    other structure joins) and refits on the sub-pixel ridge points left,
    weighted down towards the ends and by residual.
    """
    run = _run_range(normal, ridge_pts, ridge_w, cfg)
    for _ in range(cfg.local_refits):
        if run is None:
            return normal, None
        core, e1, e2, a0, a1 = run
        trim = min(cfg.trim_rad, 0.25 * (a1 - a0))
        sel = core[_in_range(ridge_pts[core], e1, e2, a0 + trim, a1 - trim)]
        if len(sel) < 3:
            break
        wt = ridge_w[sel]
        # taper towards the run ends so a symmetric bow there shifts the fit but cannot tilt it
        mid, half = 0.5 * (a0 + a1), 0.5 * (a1 - a0) - trim
        ang = np.arctan2(ridge_pts[sel] @ e2, ridge_pts[sel] @ e1)
        t = np.abs(np.mod(ang - mid + np.pi, 2 * np.pi) - np.pi) / max(half, 1e-12)
        wt = wt * np.cos(0.5 * np.pi * np.clip(t, 0.0, 1.0))
        # biweight on the residual sheds stray structure caught inside the tolerance
        r = (ridge_pts[sel] @ normal) / np.sin(cfg.inlier_tol_rad)
        wt = wt * (1 - np.clip(r * r, 0, 1)) ** 2 + 1e-9
        try:
            new = fit_great_circle(ridge_pts[sel], wt).normal
        except DegenerateFitError:
            break
        if new @ normal < 0:
            new = -new
        moved = np.linalg.norm(new - normal)
        normal = new
        mid = 0.5 * (a0 + a1)
        run = _run_range(normal, ridge_pts, ridge_w, cfg, anchor=np.cos(mid) * e1 + np.sin(mid) * e2)
        if moved < 1e-10:
            break
    return normal, run


def ransac_great_circles(samples: EdgeSamples, cfg: RansacConfig = RansacConfig()) -> list[GreatCircleSegment]:
    """Greedy multi-model RANSAC for great-circle segments.

    Minimal sets and support use the ridge samples (local maxima of the
    map), so a blurred band votes once across its width.  Each round draws
    ``cfg.max_iterations`` pairs (the second bearing taken at moderate angular
    distance from the first), scores circles by weighted ridge support,
    polishes the best few against the full band, keeps the heaviest
    contiguous run along the winner and retires the ridge samples around it.
    Rounds stop when the best run weighs less than ``cfg.min_inliers`` or
    ``cfg.max_lines`` segments exist.

    Raises:
        ExtractionError: If fewer than ``cfg.min_inliers`` samples are given.
    """
    n_all = len(samples)
    if n_all < 2 or samples.weights.sum() < cfg.min_inliers:
        raise ExtractionError(f"only {n_all} edge samples, need at least {cfg.min_inliers} weight")
    rng = np.random.default_rng(cfg.seed)
    pts_all = np.ascontiguousarray(samples.bearings, dtype=np.float64)
    w_all = samples.weights.astype(np.float64) if cfg.weighted else np.ones(n_all)
    ridge_idx = np.flatnonzero(samples.ridge) if samples.ridge is not None else np.arange(n_all)
    if len(ridge_idx) < 2:
        raise ExtractionError("no ridge samples to seed hypotheses")
    rpts_all = np.ascontiguousarray(samples.ridge_points()[ridge_idx], dtype=np.float64)
    rw_all = w_all[ridge_idx]
    tree = cKDTree(rpts_all)
    alive = np.ones(len(ridge_idx), dtype=bool)
    chord_min = 2 * np.sin(cfg.pair_min_rad / 2)
    chord_max = 2 * np.sin(cfg.pair_max_rad / 2)
    sin_tol = np.sin(cfg.inlier_tol_rad)
    sin_band = np.sin(cfg.band_tol_rad)
    segments = []
    failures = 0
    while len(segments) < cfg.max_lines and failures < cfg.max_failures:
        idx = np.flatnonzero(alive)
        if len(idx) < 2 or rw_all[idx].sum() < cfg.min_inliers:
            break
        rpts, rw = rpts_all[idx], rw_all[idx]
        first = rng.choice(len(idx), size=cfg.max_iterations, p=rw / rw.sum())
        neigh = tree.query_ball_point(rpts[first], chord_max)
        normals = []
        for f, nb in zip(first, neigh):
            nb = np.asarray(nb, dtype=np.int64)
            nb = nb[alive[nb]]
            if len(nb):
                d = np.linalg.norm(rpts_all[nb] - rpts[f], axis=1)
                nb = nb[d >= chord_min]
            u = rng.random()
            if len(nb) == 0:
                continue
            c = np.cross(rpts[f], rpts_all[nb[int(u * len(nb))]])
            nc = np.linalg.norm(c)
            if nc > 1e-9:
                normals.append(c / nc)
        if not normals:
            break
        normals = np.ascontiguousarray(normals)
        scores = kernels.circle_support(normals, rpts, rw, sin_tol)
        # full-circle support rewards circles grazing many scattered fragments;
        # rank the leaders again by the weight of their heaviest contiguous run
        leaders = np.argsort(-scores, kind="stable")[:cfg.run_candidates]
        run_scores = []
        for k in leaders:
            run = _run_range(normals[k], rpts, rw, cfg)
            run_scores.append(0.0 if run is None else float(rw[run[0]].sum()))
        order = leaders[np.argsort(-np.asarray(run_scores), kind="stable")]
        best = None
        for k in order[:cfg.polish_candidates]:
            normal, run = _polish(normals[k], rpts, rw, cfg)
            if run is not None:
                sup = float(rw[run[0]].sum())
                if best is None or sup > best[0]:
                    best = (sup, normal, run)
        if best is None or best[0] < cfg.min_inliers:
            failures += 1
            if best is not None:
                # a light run: retire it so the next round looks elsewhere
                alive[idx[best[2][0]]] = False
            continue
        sup, normal, (core, e1, e2, a0, a1) = best
        start = np.cos(a0) * e1 + np.sin(a0) * e2
        end = np.cos(a1) * e1 + np.sin(a1) * e2
        retire = np.flatnonzero((np.abs(rpts @ normal) <= sin_band)
                                & _in_range(rpts, e1, e2, a0 - cfg.band_tol_rad, a1 + cfg.band_tol_rad))
        retire = np.union1d(retire, core)
        alive[idx[retire]] = False
        segments.append(GreatCircleSegment(GreatCircle(normal), start, end, support=sup,
                                           inliers=ridge_idx[idx[retire]]))
    return segments


# -- Manhattan frame -----------------------------------------------------------------

def _nearest_rotation(d, weights):
    u, _, vt = np.linalg.svd(d * weights[None, :])
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def canonicalize_frame(r: np.ndarray) -> ManhattanFrame:
    """Order and sign the columns: ``r3`` closest to +z, ``r1`` with yaw in ``[-pi/4, pi/4)``."""
    cols = [r[:, k] for k in range(3)]
    k3 = int(np.argmax([abs(c[2]) for c in cols]))
    r3 = cols[k3] if cols[k3][2] >= 0 else -cols[k3]
    horiz = [cols[k] for k in range(3) if k != k3]
    cands = [s * c for c in horiz for s in (1.0, -1.0)]
    yaws = [np.arctan2(c[1], c[0]) for c in cands]
    ok = [i for i, y in enumerate(yaws) if -np.pi / 4 <= y < np.pi / 4]
    i1 = ok[0] if ok else int(np.argmin(np.abs(yaws)))
    r1 = cands[i1]
    r1 = normalize(r1 - (r1 @ r3) * r3)
    r2 = np.cross(r3, r1)
    return ManhattanFrame.from_columns(r1, r2, r3)


def _assign(normals, dirs, sin_tol):
    """Index of the compatible frame direction for each line (or -1)."""
    dots = np.abs(normals @ dirs)
    k = np.argmin(dots, axis=1)
    return np.where(dots[np.arange(len(normals)), k] <= sin_tol, k, -1)


def refine_frame(normals, weights, r, tol_rad: float, rounds: int = 3) -> np.ndarray:
    """Fit each direction to its compatible lines, then snap to the nearest rotation.

    Returns the refined ``3 x 3`` direction matrix (columns), not canonicalised.
    """
    normals = np.asarray(normals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    sin_tol = np.sin(tol_rad)
    r = np.array(r, dtype=np.float64)
    for _ in range(rounds):
        lab = _assign(normals, r, sin_tol)
        new = r.copy()
        wts = np.full(3, 1e-6)
        for k in range(3):
            sel = lab == k
            if sel.sum() < 2:
                continue
            scatter = (normals[sel] * weights[sel, None]).T @ normals[sel]
            evals, evecs = np.linalg.eigh(scatter)
            if evals[1] <= 1e-9 * max(evals[2], 1e-300):
                continue
            d = evecs[:, 0]
            new[:, k] = d if d @ r[:, k] >= 0 else -d
            wts[k] = weights[sel].sum()
        r = _nearest_rotation(new, wts)
    return r


def estimate_manhattan_frame(segments, tol_rad: float = 0.05, iterations: int = 2000, seed: int = 0,
                             refinements: int = 3, max_tilt_rad: float | None = None) -> ManhattanFrame:
    """Three orthogonal vanishing directions best explaining the lines.

    Hypotheses come from random line triples: two lines give a direction
    ``d1 = n1 x n2``, a third gives ``d2 = n3 x d1``, and ``d3 = d1 x d2``.
    A line is compatible with direction ``d`` when ``|n . d| <= sin(tol)``;
    hypotheses are scored by the probability of compatible lines.  The winner
    is refined by fitting each direction to its lines and projecting the
    three onto the nearest rotation (weighted orthogonal Procrustes).

    With ``max_tilt_rad`` set, hypotheses whose most vertical direction is
    further than that from the image's up axis are skipped (panoramas are
    normally levelled; few lines leave arbitrary frames too much freedom).
    If no hypothesis passes, all are used.

    Raises:
        FrameError: If the lines support fewer than two distinct directions.
    """
    segs = list(segments)
    if len(segs) < 3:
        raise FrameError("need at least three lines")
    normals = np.array([s.normal for s in segs])
    prob = np.array([max(s.probability, s.support, 1e-12) for s in segs])
    prob = prob / prob.sum()
    sin_tol = np.sin(tol_rad)
    rng = np.random.default_rng(seed)
    m = len(segs)

    tri = rng.choice(m, size=(iterations, 3), p=prob)
    d1 = np.cross(normals[tri[:, 0]], normals[tri[:, 1]])
    n1 = np.linalg.norm(d1, axis=1)
    d2 = np.cross(normals[tri[:, 2]], d1)
    n2 = np.linalg.norm(d2, axis=1)
    ok = (n1 > 1e-6) & (n2 > 1e-6 * np.maximum(n1, 1e-300))
    if not ok.any():
        raise FrameError("lines do not define two distinct vanishing directions")
    d1 = d1[ok] / n1[ok, None]
    d2 = d2[ok] / np.linalg.norm(d2[ok], axis=1, keepdims=True)
    d3 = np.cross(d1, d2)
    dirs = np.stack([d1, d2, d3], axis=2)                  # (K, 3, 3), columns are directions
    if max_tilt_rad is not None:
        upright = np.abs(dirs[:, 2, :]).max(axis=1) >= np.cos(max_tilt_rad)
        if upright.any():
            dirs = dirs[upright]
    dots = np.abs(np.einsum("li,kij->klj", normals, dirs))  # (K, lines, 3)
    compatible = dots.min(axis=2) <= sin_tol
    scores = compatible.astype(np.float64) @ prob
    r = dirs[int(np.argmax(scores))]

    r = refine_frame(normals, prob, r, tol_rad, refinements)
    lab = _assign(normals, r, sin_tol)
    counts = [(lab == k).sum() for k in range(3)]
    # a direction is only "recovered" if some line pins it down exclusively
    if sum(c >= 1 for c in counts) < 2:
        raise FrameError("fewer than two vanishing directions are supported")
    return canonicalize_frame(r)


def _yaw_of(normals):
    """Yaw (mod a quarter turn) of the horizontal direction lying on each circle, and its reliability.

    The direction is ``n x z``; its yaw error grows like ``1 / |n_z|``, so
    the reliability (an inverse variance) is ``n_z^2``, near zero for the
    verticals.
    """
    d = np.column_stack([normals[:, 1], -normals[:, 0]])
    rel = np.linalg.norm(d, axis=1) * normals[:, 2] ** 2
    return np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi / 2), rel


def level_frame(yaw: float) -> np.ndarray:
    return rotation_z(yaw)


def refine_level_yaw(normals, weights, yaw: float, tol_rad: float, rounds: int = 3) -> float:
    """Weighted quarter-turn circular mean of the yaws of the horizontal lines compatible with ``yaw``."""
    normals = np.asarray(normals, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    sin_tol = np.sin(tol_rad)
    ang, rel = _yaw_of(normals)
    for _ in range(rounds):
        lab = _assign(normals, level_frame(yaw), sin_tol)
        sel = ((lab == 0) | (lab == 1)) & (rel > 1e-3)
        if not sel.any():
            break
        w = weights[sel] * rel[sel]
        z = np.sum(w * np.exp(4j * (ang[sel] - yaw)))
        yaw = yaw + float(np.angle(z)) / 4
    return float(np.mod(yaw, np.pi / 2))


def estimate_level_frame(segments, tol_rad: float = 0.05, refinements: int = 3) -> ManhattanFrame:
    """Manhattan frame of a levelled panorama: vertical axis fixed to +z, yaw from the lines.

    Every horizontal line proposes the yaw of its direction; the proposal
    with the most compatible line probability wins and is refined by a
    weighted circular mean over its compatible lines.

    Raises:
        FrameError: If no horizontal line is available.
    """
    segs = list(segments)
    if not segs:
        raise FrameError("no lines")
    normals = np.array([s.normal for s in segs])
    prob = np.array([max(s.probability, s.support, 1e-12) for s in segs])
    ang, rel = _yaw_of(normals)
    cand = np.flatnonzero(rel > np.sin(tol_rad) ** 2)
    if not len(cand):
        raise FrameError("no horizontal line to fix the yaw")
    sin_tol = np.sin(tol_rad)
    dirs = np.stack([level_frame(a) for a in ang[cand]])
    dots = np.abs(np.einsum("li,kij->klj", normals, dirs))
    scores = (dots.min(axis=2) <= sin_tol).astype(np.float64) @ prob
    yaw = refine_level_yaw(normals, prob, float(ang[cand[int(np.argmax(scores))]]), tol_rad, refinements)
    return canonicalize_frame(level_frame(yaw))


# -- lines through known vanishing points --------------------------------------------

def _fit_in_pencil(q, w):
    """Least-squares normal ``(c, s)`` in a 2D pencil basis: least eigenvector of ``sum w q q^T``."""
    evals, evecs = np.linalg.eigh((q * w[:, None]).T @ q)
    return evecs[:, 0]


def _runs(pos, weights, max_gap):
    """Split circle positions into contiguous runs; returns lists of indices."""
    order = np.argsort(pos, kind="stable")
    a = pos[order]
    gaps = np.diff(np.concatenate([a, a[:1] + 2 * np.pi]))
    start = (int(np.argmax(gaps)) + 1) % len(a)
    order = np.roll(order, -start)
    gaps = np.roll(gaps, -start)[:-1]
    return np.split(order, np.flatnonzero(gaps > max_gap) + 1)


def sweep_manhattan_lines(samples: EdgeSamples, frame: ManhattanFrame,
                          cfg: RansacConfig = RansacConfig()) -> list[GreatCircleSegment]:
    """Structural segments whose circles pass through a frame direction.

    A line parallel to frame axis ``d`` lies on a circle whose normal is
    perpendicular to ``d``, so each family is a one-parameter pencil.
    Ridge samples vote for the pencil angle of the plane through ``d`` and
    themselves.  The strongest peak over all three families is taken,
    its inliers split into contiguous runs, every heavy run refit on the
    full band inside the pencil, and the ridge samples along the circle
    retired.  This repeats until no peak reaches ``cfg.min_inliers``.
    """
    pts_all = np.ascontiguousarray(samples.bearings, dtype=np.float64)
    w_all = samples.weights.astype(np.float64) if cfg.weighted else np.ones(len(samples))
    ridge = np.flatnonzero(samples.ridge) if samples.ridge is not None else np.arange(len(samples))
    rp, rw = pts_all[ridge], w_all[ridge]
    nbins = int(np.ceil(np.pi / cfg.sweep_bin_rad))
    width = max(1, int(round(cfg.inlier_tol_rad / cfg.sweep_bin_rad)))
    sin_tol = np.sin(cfg.inlier_tol_rad)
    sin_band = np.sin(cfg.band_tol_rad)
    sin_excl = np.sin(cfg.vp_exclusion_rad)

    fams = []
    for k in range(3):
        d = frame.matrix[:, k]
        e1, e2 = GreatCircle(d).basis()
        c = np.cross(d, rp)
        alpha = np.mod(np.arctan2(c @ e2, c @ e1), np.pi)
        valid = np.linalg.norm(c, axis=1) > sin_excl
        bins = np.minimum((alpha / cfg.sweep_bin_rad).astype(np.int64), nbins - 1)
        fams.append((d, e1, e2, bins, valid, (pts_all @ e1), (pts_all @ e2)))

    alive = np.ones(len(rp), dtype=bool)
    segments = []
    kernel = np.ones(2 * width + 1)
    while len(segments) < cfg.max_lines:
        best = None
        for k, (d, e1, e2, bins, valid, _, _) in enumerate(fams):
            sel = alive & valid
            if not sel.any():
                continue
            hist = np.bincount(bins[sel], weights=rw[sel], minlength=nbins)
            # windowed sums over +-tol, wrapping at pi
            win = np.convolve(np.concatenate([hist[-width:], hist, hist[:width]]), kernel, "valid")
            j = int(np.argmax(win))
            if best is None or win[j] > best[0]:
                best = (float(win[j]), k, j)
        if best is None or best[0] < cfg.min_inliers:
            break
        _, k, j = best
        d, e1, e2, bins, valid, q1, q2 = fams[k]
        a = (j + 0.5) * cfg.sweep_bin_rad
        normal = np.cos(a) * e1 + np.sin(a) * e2
        # the peak bin is coarse; settle the angle on the ridge inliers first
        for _ in range(2):
            near = alive & (np.abs(rp @ normal) <= sin_tol)
            if near.sum() < 2:
                break
            cs = _fit_in_pencil(np.column_stack([rp[near] @ e1, rp[near] @ e2]), rw[near])
            normal = cs[0] * e1 + cs[1] * e2
        near = np.flatnonzero(alive & (np.abs(rp @ normal) <= sin_tol))
        if len(near) < 2:
            alive[np.abs(rp @ normal) <= sin_tol] = False
            alive[valid & (np.mod(bins - j + width, nbins) <= 2 * width)] = False
            continue
        b1, b2 = GreatCircle(normal).basis()
        pos = np.arctan2(rp[near] @ b2, rp[near] @ b1)
        for run in _runs(pos, rw[near], cfg.max_gap_rad):
            if rw[near[run]].sum() < cfg.min_inliers:
                continue
            ref = pos[run][np.argmax(rw[near[run]])]
            rel = np.mod(pos[run] - ref + np.pi, 2 * np.pi) - np.pi
            a0, a1 = ref + rel.min(), ref + rel.max()
            trim = min(cfg.trim_rad, 0.25 * (a1 - a0))
            band = (np.abs(pts_all @ normal) <= sin_band) & _in_range(pts_all, b1, b2, a0 + trim, a1 - trim)
            n_run = normal
            if band.sum() >= 2:
                cs = _fit_in_pencil(np.column_stack([q1[band], q2[band]]), w_all[band])
                n_run = cs[0] * e1 + cs[1] * e2
            if n_run @ normal < 0:
                n_run = -n_run
            start = np.cos(a0) * b1 + np.sin(a0) * b2
            end = np.cos(a1) * b1 + np.sin(a1) * b2
            # endpoints back onto the refit circle
            start = normalize(start - (start @ n_run) * n_run)
            end = normalize(end - (end @ n_run) * n_run)
            retire = (np.abs(rp @ normal) <= sin_band) & _in_range(rp, b1, b2, a0 - cfg.band_tol_rad,
                                                                  a1 + cfg.band_tol_rad)
            inl = np.flatnonzero(retire & alive)
            alive[retire] = False
            segments.append(GreatCircleSegment(GreatCircle(n_run), start, end, Label(k),
                                               support=float(rw[near[run]].sum()), inliers=ridge[inl]))
        # whatever is left on this circle cannot form a run; the voters of the
        # peak go too, so every round makes progress
        alive[np.abs(rp @ normal) <= sin_tol] = False
        off = np.mod(bins - j + width, nbins)
        alive[valid & (off <= 2 * width)] = False
    return segments


# -- labelling and scoring ------------------------------------------------------------

def _crosses_horizon(seg: GreatCircleSegment, up) -> bool:
    za, zb = seg.start @ up, seg.end @ up
    return za * zb < 0


def classify_lines(segments, frame: ManhattanFrame, tol_rad: float = 0.05) -> list[GreatCircleSegment]:
    """Label each segment with the frame direction its circle plane contains.

    A circle contains direction ``d`` when ``|asin(n . d)| <= tol``.  When
    several directions qualify (a wall-wall edge seen exactly along a
    horizontal axis), the vertical label wins for arcs crossing the horizon
    and the lowest-index horizontal label wins otherwise.
    """
    out = []
    dirs = frame.matrix
    for s in segments:
        ang = np.abs(np.arcsin(np.clip(s.normal @ dirs, -1.0, 1.0)))
        ok = np.flatnonzero(ang <= tol_rad)
        if len(ok) == 0:
            label = Label.UNASSIGNED
        elif len(ok) == 1:
            label = Label(int(ok[0]))
        elif Label.Z in ok and _crosses_horizon(s, frame.r3):
            label = Label.Z
        else:
            horiz = [k for k in ok if k != Label.Z]
            label = Label(int(horiz[0]))
        out.append(replace(s, label=label))
    return out


def segment_pixels(seg: GreatCircleSegment, grid: EquirectGrid) -> np.ndarray:
    """Flat pixel indices covered by the segment arc (each pixel once)."""
    return arc_pixels(seg.start, seg.end, grid)


def score_and_prune(segments, edge) -> list[GreatCircleSegment]:
    """Attach the summed edge probability along each arc; drop zero-probability lines.

    The result is sorted by probability (descending), ties by normal.
    """
    vals = as_array(edge)
    grid = edge.grid if isinstance(edge, ProbabilityMap) else EquirectGrid(vals.shape[1], vals.shape[0])
    flat = vals.reshape(-1)
    scored = []
    for s in segments:
        p = float(flat[segment_pixels(s, grid)].sum())
        if p > 0:
            scored.append(replace(s, probability=p))
    scored.sort(key=lambda s: (-s.probability, s.sort_key()))
    return scored


def dump_segments(segments, grid: EquirectGrid) -> str:
    """Debug text: ``label nx ny nz (u,v) (u,v) probability`` per line."""
    rows = []
    for s in segments:
        (ua, ub), (va, vb) = bearing_to_pixel(np.array([s.start, s.end]), grid)
        n = s.normal
        rows.append(f"{s.label.name} {n[0]:.9f} {n[1]:.9f} {n[2]:.9f} "
                    f"({ua:.3f},{va:.3f}) ({ub:.3f},{vb:.3f}) {s.probability:.9g}")
    return "\n".join(rows) + ("\n" if rows else "")


@dataclass(frozen=True)
class LineResult:
    segments: list
    frame: ManhattanFrame


def _free_normal(seg: GreatCircleSegment, pts, w, cfg: RansacConfig):
    """Unconstrained circle fit on the band samples along a segment (or None)."""
    n = seg.normal
    b1, b2 = GreatCircle(n).basis()
    a0 = np.arctan2(seg.start @ b2, seg.start @ b1)
    a1 = a0 + seg.length if seg.end @ np.cross(n, seg.start) >= 0 else a0 - seg.length
    a0, a1 = min(a0, a1), max(a0, a1)
    trim = min(cfg.trim_rad, 0.25 * (a1 - a0))
    sel = (np.abs(pts @ n) <= np.sin(cfg.band_tol_rad)) & _in_range(pts, b1, b2, a0 + trim, a1 - trim)
    if sel.sum() < 3:
        return None
    try:
        m = fit_great_circle(pts[sel], w[sel]).normal
    except DegenerateFitError:
        return None
    return m


def lines_in_frame(edge: ProbabilityMap, samples: EdgeSamples, frame: ManhattanFrame,
                   cfg: RansacConfig = RansacConfig(), frame_tol_rad: float = 0.05,
                   label_tol_rad: float = 0.05, passes: int = 1, level: bool = False) -> LineResult:
    """Sweep lines through a frame's vanishing directions, refitting the frame between passes.

    With ``level`` only the yaw is refit.
    """
    pts = samples.bearings
    w = samples.weights.astype(np.float64)
    swept = []
    for p in range(passes):
        swept = sweep_manhattan_lines(samples, frame, cfg)
        if p == passes - 1:
            break
        free = [(_free_normal(s, pts, w, cfg), s.support) for s in swept]
        free = [(n, sw) for n, sw in free if n is not None]
        if len(free) >= 3:
            normals = np.array([n for n, _ in free])
            weights = np.array([sw for _, sw in free])
            if level:
                yaw = np.arctan2(frame.matrix[1, 0], frame.matrix[0, 0])
                r = level_frame(refine_level_yaw(normals, weights, yaw, frame_tol_rad))
            else:
                r = refine_frame(normals, weights, frame.matrix, frame_tol_rad)
            frame = canonicalize_frame(r)
    swept = score_and_prune(swept, edge)
    return LineResult(classify_lines(swept, frame, label_tol_rad), frame)


def extract_lines(edge: ProbabilityMap, cfg: RansacConfig = RansacConfig(), frame_tol_rad: float = 0.05,
                  label_tol_rad: float = 0.05, frame_passes: int = 1, level: bool = True) -> LineResult:
    """Edge map to labelled, scored structural segments and the Manhattan frame.

    RANSAC segments give a first frame; lines are then swept through the
    frame's vanishing directions, the frame is refit on free fits of those
    lines, and the sweep repeats ``frame_passes`` times in total.  With
    ``level`` the camera is taken as levelled (frame vertical = +z) and
    only the yaw is estimated.
    """
    samples = extract_edge_pixels(edge, cfg.edge_threshold)
    segs = ransac_great_circles(samples, cfg)
    segs = score_and_prune(segs, edge)
    if level:
        frame = estimate_level_frame(segs, frame_tol_rad)
    else:
        frame = estimate_manhattan_frame(segs, frame_tol_rad, seed=cfg.seed)
    return lines_in_frame(edge, samples, frame, cfg, frame_tol_rad, label_tol_rad, frame_passes, level)
