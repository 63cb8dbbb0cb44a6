"""Layout hypotheses from structural lines: corners, walls, circuits, scoring, lifting."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import kernels
from .errors import DegenerateFitError, ExtractionError, FrameError, GeometryError, SolverError
from .layout import LayoutModel, is_simple_polygon, point_in_polygon, signed_area, wall_angles
from .lines import (GreatCircleSegment, Label, LineResult, RansacConfig, extract_edge_pixels, extract_lines,
                    lines_in_frame)
from .maps import ProbabilityMap, arc_pixels, as_array, sample_bilinear, suppress_background
from .sphere import EquirectGrid, ManhattanFrame, bearing_to_pixel, normalize, rotation_z


class CornerKind(enum.Enum):
    CEILING = "ceiling"
    FLOOR = "floor"


@dataclass(frozen=True, eq=False)
class CornerCandidate:
    bearing: np.ndarray
    pixel: tuple[float, float]
    kind: CornerKind
    parent_lines: tuple[int, int] = (-1, -1)
    score: float = 0.0
    # True when no line intersection backs this corner up
    synthetic: bool = False


@dataclass(frozen=True)
class SolverConfig:
    """Hypothesis generation and selection settings (angles in radians).

    Wall planes are quantised to ``offset_bins`` log-spaced distances in
    ``[min_offset, max_offset]`` camera heights and azimuth to
    ``azimuth_bins`` columns.
    """

    max_corners: int = 12
    max_hypotheses: int = 500
    # spans are extended by this much when intersecting lines into corners
    span_slack_rad: float = 0.05
    # corner-candidate match radius used to flag synthetic corners
    corner_match_rad: float = 0.06
    azimuth_bins: int = 256
    offset_bins: int = 200
    min_offset: float = 0.2
    max_offset: float = 25.0
    # start states tried by the cyclic programme
    dp_starts: int = 2
    # weight of vertical-edge and corner evidence at a junction
    junction_weight: float = 1.0
    # coarse grid of the yaw check
    yaw_bins: int = 128
    yaw_offset_bins: int = 64
    # walls spanning less azimuth than this are not resolvable and are rejected
    min_wall_rad: float = 0.08
    refine: bool = True
    # camera taken as levelled: the frame's vertical is the image up axis
    level: bool = True
    # smooth and level noisy maps before use (clean maps pass unchanged)
    denoise: bool = True
    camera_height: float = 1.0

    def __post_init__(self):
        if self.max_corners < 4 or self.max_hypotheses < 1 or self.dp_starts < 1:
            raise ValueError("max_corners >= 4 and positive hypothesis limits required")
        if self.azimuth_bins < 16 or self.offset_bins < 2 or not 0 < self.min_offset < self.max_offset:
            raise ValueError("invalid wall-state grid")
        if self.camera_height <= 0:
            raise ValueError("camera_height must be positive")


@dataclass(frozen=True, eq=False)
class LayoutHypothesis:
    """A closed room candidate: paired ceiling and floor rings.

    ``polygon`` is the floor ring in frame coordinates at unit camera height
    and ``ceiling_z`` the matching ceiling height.  ``corners`` lists the
    ceiling ring then the floor ring; ``edges`` holds bearing pairs for the
    ceiling ring, the floor ring and the verticals.
    """

    polygon: np.ndarray
    ceiling_z: float
    frame: ManhattanFrame
    corners: tuple
    edges: tuple
    walls: tuple = ()

    @property
    def n_corners(self) -> int:
        return len(self.polygon)

    @property
    def corner_set(self) -> np.ndarray:
        return np.array([c.pixel for c in self.corners])

    def canonical_key(self) -> tuple:
        return tuple(np.round(self.polygon, 12).reshape(-1))


@dataclass(frozen=True)
class HypothesisScore:
    edge_term: float
    corner_term: float
    w_e: float
    w_c: float

    @property
    def total(self) -> float:
        return self.w_e * self.edge_term + self.w_c * self.corner_term


def validate_hypothesis(h: LayoutHypothesis) -> None:
    """Raise :class:`SolverError` unless the ring invariants hold."""
    n = h.n_corners
    if n < 4 or n % 2:
        raise SolverError(f"ring needs an even corner count >= 4, got {n}")
    if len(h.corners) != 2 * n:
        raise SolverError("ceiling and floor rings differ in length")
    kinds = [c.kind for c in h.corners]
    if kinds[:n] != [CornerKind.CEILING] * n or kinds[n:] != [CornerKind.FLOOR] * n:
        raise SolverError("corners must list the ceiling ring then the floor ring")
    d = np.roll(h.polygon, -1, axis=0) - h.polygon
    horiz = np.abs(d[:, 1]) <= 1e-9 * max(1.0, np.abs(h.polygon).max())
    if not np.all(horiz != np.roll(horiz, -1)):
        raise SolverError("wall directions do not alternate")
    if not is_simple_polygon(h.polygon):
        raise SolverError("ring is self-intersecting")


# -- corner candidates --------------------------------------------------------------

def _arc_intersections(a: GreatCircleSegment, b: GreatCircleSegment, slack: float):
    d = np.cross(a.normal, b.normal)
    nd = np.linalg.norm(d)
    if nd < 1e-9:
        return []
    d = d / nd
    return [p for p in (d, -d) if a.contains(p, slack) and b.contains(p, slack)]


def candidate_corners(segments, corner, frame: ManhattanFrame,
                      slack_rad: float = SolverConfig.span_slack_rad) -> list[CornerCandidate]:
    """Intersect every vertical line with every horizontal one.

    Each intersection that lies within both spans (extended by
    ``slack_rad``) becomes a candidate scored by the corner map.
    """
    vals = as_array(corner)
    grid = EquirectGrid(vals.shape[1], vals.shape[0])
    segs = list(segments)
    vert = [i for i, s in enumerate(segs) if s.label == Label.Z]
    horiz = [i for i, s in enumerate(segs) if s.label in (Label.X, Label.Y)]
    out = []
    for i in vert:
        for j in horiz:
            for p in _arc_intersections(segs[i], segs[j], slack_rad):
                u, v = bearing_to_pixel(p, grid)
                kind = CornerKind.CEILING if p @ frame.r3 > 0 else CornerKind.FLOOR
                score = float(max(sample_bilinear(vals, u, v), 0.0))
                out.append(CornerCandidate(p, (float(u), float(v)), kind, (i, j), score))
    return out


# -- walls from horizontal lines -------------------------------------------------------

def _wrap(a):
    """Angle wrapped into ``[-pi, pi)``."""
    return np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi


@dataclass(frozen=True)
class _LineObs:
    axis: int           # 0: runs along x (plane y = offset), 1: runs along y (plane x = offset)
    unit_offset: float  # offset of the wall plane for a line at unit height from the camera
    az0: float          # azimuth interval covered, counter-clockwise from az0 to az1
    az1: float
    ceiling: bool
    weight: float


def _sample_arc(a, b, n=48):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return normalize((1 - t) * a + t * b)


def _az_interval(xy):
    az = np.arctan2(xy[:, 1], xy[:, 0])
    rel = _wrap(az - az[0])
    return float(az[0] + rel.min()), float(az[0] + rel.max())


def _line_observations(segments, frame: ManhattanFrame) -> list[_LineObs]:
    """Floor and ceiling pieces of every horizontal segment, as wall evidence."""
    obs = []
    for s in segments:
        if s.label not in (Label.X, Label.Y):
            continue
        axis = int(s.label)
        nf = frame.to_frame(s.normal)
        k_off = 1 - axis
        if abs(nf[k_off]) < 1e-9:
            continue
        pts = frame.to_frame(_sample_arc(s.start, s.end))
        for ceiling in (False, True):
            part = pts[pts[:, 2] > 1e-3] if ceiling else pts[pts[:, 2] < -1e-3]
            if len(part) < 2:
                continue
            plane = 1.0 if ceiling else -1.0
            off = float(-nf[2] * plane / nf[k_off])
            a0, a1 = _az_interval(part)
            obs.append(_LineObs(axis, off, a0, a1, ceiling, float(s.probability) * len(part) / len(pts)))
    return obs


def _overlap(a0, a1, b0, b1) -> float:
    """Overlap length of two azimuth intervals (negative: the gap between them)."""
    ca, cb = 0.5 * (a0 + a1), 0.5 * (b0 + b1)
    # move b by whole turns so the two centres are at most half a turn apart
    shift = ca + float(_wrap(cb - ca)) - cb
    return min(a1, b1 + shift) - max(a0, b0 + shift)


def _vertical_lines(segments, frame: ManhattanFrame):
    """``(azimuth, weight, ceiling ratio or nan)`` for each vertical segment."""
    out = []
    for s in segments:
        if s.label != Label.Z:
            continue
        a, b = frame.to_frame(s.start), frame.to_frame(s.end)
        mid = a + b
        az = float(np.arctan2(mid[1], mid[0]))
        ratio = np.nan
        if a[2] * b[2] < 0:
            top, bot = (a, b) if a[2] > 0 else (b, a)
            t_bot = -bot[2] / np.hypot(bot[0], bot[1])
            if t_bot > 1e-6:
                ratio = (top[2] / np.hypot(top[0], top[1])) / t_bot
        out.append((az, float(s.probability), ratio))
    return out


def estimate_ceiling_ratio(obs: list[_LineObs], verticals, window: float = 0.03) -> float:
    """Ceiling height over camera height, by weighted voting.

    A floor line and a ceiling line of the same wall (same axis and side,
    azimuth ranges overlapping by half the shorter one) give
    ``floor offset / ceiling unit offset``; verticals spanning the horizon
    give weaker votes from their end elevations.

    Raises:
        SolverError: Without any such evidence.
    """
    ratios, weights = [], []
    floors = [o for o in obs if not o.ceiling]
    ceils = [o for o in obs if o.ceiling]
    for f in floors:
        for c in ceils:
            if f.axis != c.axis or f.unit_offset * c.unit_offset <= 0:
                continue
            short = min(f.az1 - f.az0, c.az1 - c.az0)
            if _overlap(f.az0, f.az1, c.az0, c.az1) < 0.5 * short:
                continue
            r = f.unit_offset / c.unit_offset
            if 0.05 < r < 20:
                ratios.append(r)
                weights.append(min(f.weight, c.weight))
    for _, wt, r in verticals:
        if np.isfinite(r) and 0.05 < r < 20:
            ratios.append(r)
            weights.append(0.25 * wt)
    if not ratios:
        raise SolverError("no floor/ceiling evidence for the room height")
    lr = np.log(np.array(ratios))
    w = np.array(weights) + 1e-12
    close = np.abs(lr[:, None] - lr[None, :]) <= window
    best = int(np.argmax(close.astype(np.float64) @ w))
    sel = close[best]
    return float(np.exp(np.average(lr[sel], weights=w[sel])))


# -- polar wall programme ----------------------------------------------------------------

def _plan_bearings(pts, z, frame: ManhattanFrame):
    p = np.column_stack([pts, np.full(len(pts), z)])
    return normalize(frame.to_world(p))


class PolarStates:
    """Discrete wall states and per-column evidence for the polar programme.

    State ``s`` is a wall plane ``y = value`` (axis 0) or ``x = value``
    (axis 1) with ``|value|`` on a log-spaced grid.  Column ``c`` covers the
    azimuth range around ``-pi + (c + 0.5) * 2 pi / N`` in frame
    coordinates; boundary ``c`` sits at ``-pi + c * 2 pi / N``.
    """

    def __init__(self, frame: ManhattanFrame, cfg: "SolverConfig"):
        self.frame = frame
        self.n_cols = cfg.azimuth_bins
        k = cfg.offset_bins
        self.grid = np.geomspace(cfg.min_offset, cfg.max_offset, k)
        self.log0 = np.log(cfg.min_offset)
        self.dlog = (np.log(cfg.max_offset) - self.log0) / (k - 1)
        self.k = k
        # groups: +y, -y, +x, -x
        self.axis = np.repeat([0, 0, 1, 1], k)
        self.value = np.concatenate([self.grid, -self.grid, self.grid, -self.grid])
        self.max_offset = cfg.max_offset
        step = 2 * np.pi / self.n_cols
        self.col_az = -np.pi + (np.arange(self.n_cols) + 0.5) * step
        self.bnd_az = -np.pi + np.arange(self.n_cols) * step

    @property
    def n_states(self) -> int:
        return 4 * self.k

    def ranges(self, az):
        """``(len(az), S)`` distance from the camera to each wall plane along ``az`` (nan if behind)."""
        c, s = np.cos(az)[:, None], np.sin(az)[:, None]
        den = np.where(self.axis[None, :] == 0, s, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.value[None, :] / den
        return np.where((r > 0) & (r <= self.max_offset * 4), r, np.nan)

    def index_of(self, axis, value):
        """State index for wall values (``-1`` off the grid)."""
        mag = np.abs(value)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.rint((np.log(mag) - self.log0) / self.dlog)
        ok = np.isfinite(k) & (k >= 0) & (k < self.k)
        group = 2 * axis + (value < 0)
        return np.where(ok, group * self.k + np.where(ok, k, 0).astype(np.int64), -1)

    def aligned(self, values, rows_per_pixel: int = 2):
        """Map resampled on frame azimuths (boundaries and column centres interleaved) by elevation."""
        h, w = values.shape
        ne = rows_per_pixel * h + 1
        az = -np.pi + np.arange(2 * self.n_cols) * (np.pi / self.n_cols)
        el = np.linspace(-0.5 * np.pi, 0.5 * np.pi, ne)
        ce = np.cos(el)
        pts = np.stack([np.cos(az)[:, None] * ce, np.sin(az)[:, None] * ce,
                        np.broadcast_to(np.sin(el), (len(az), ne))], axis=-1).reshape(-1, 3)
        u, v = bearing_to_pixel(self.frame.to_world(pts), EquirectGrid(w, h))
        return sample_bilinear(values, u, v).reshape(len(az), ne)

    @staticmethod
    def sample(aligned, rows, r, z):
        """Linear lookup at elevation ``atan2(z, r)`` in rows ``rows`` of an aligned map (0 where ``r`` is nan)."""
        ne = aligned.shape[1]
        ok = np.isfinite(r)
        el = np.arctan2(z, np.where(ok, r, 1.0))
        k = (el + 0.5 * np.pi) * ((ne - 1) / np.pi)
        k0 = np.clip(np.floor(k).astype(np.int64), 0, ne - 2)
        f = k - k0
        rr = np.broadcast_to(np.asarray(rows)[:, None], r.shape)
        out = aligned[rr, k0] * (1 - f) + aligned[rr, k0 + 1] * f
        return np.where(ok, out, 0.0)

    def evidence(self, edge_al, ratio: float | None):
        """``(N, S)`` summed edge probability at the floor (and ceiling) line of each state."""
        rows = 2 * np.arange(self.n_cols) + 1
        r = self.ranges(self.col_az)
        e = self.sample(edge_al, rows, r, -1.0)
        if ratio is not None:
            e = e + self.sample(edge_al, rows, r, ratio)
        return np.where(np.isfinite(r), e, -1e9)

    def junctions(self, edge_al, corner_al, ratio: float, weight: float):
        """Partner state and corner bonus for a junction at every boundary.

        Returns ``(partner, bonus)``, both ``(N, S)``.  A wall of one axis
        can only meet the wall of the other axis through the same point of
        the floor outline.
        """
        az = self.bnd_az
        rows = 2 * np.arange(self.n_cols)
        r = self.ranges(az)
        c, s = np.cos(az)[:, None], np.sin(az)[:, None]
        other = np.where(self.axis[None, :] == 0, r * c, r * s)
        partner = self.index_of(1 - self.axis[None, :], np.nan_to_num(other, nan=0.0))
        partner = np.where(np.isfinite(r), partner, -1)
        bonus = np.zeros(r.shape)
        if weight == 0:
            return partner, bonus
        xs = self.axis == 0
        rx = r[:, xs]
        vert = np.zeros(rx.shape)
        zs = np.linspace(-1.0, ratio, 6)[1:-1]
        for z in zs:
            vert += self.sample(edge_al, rows, rx, z)
        vert /= len(zs)
        cor = 0.5 * (self.sample(corner_al, rows, rx, -1.0) + self.sample(corner_al, rows, rx, ratio))
        bonus[:, xs] = weight * (vert + cor)
        # a y-wall state takes the bonus of its x-wall partner
        ys = np.flatnonzero(~xs)
        p = partner[:, ys]
        bonus[:, ys] = np.where(p >= 0, np.take_along_axis(bonus, np.maximum(p, 0), axis=1), 0.0)
        return partner, bonus


def _start_column(evidence, half: int = 3):
    """Column inside a wall with strong support: maximises the windowed minimum of the best state score."""
    best = evidence.max(axis=1)
    n = len(best)
    idx = (np.arange(n)[:, None] + np.arange(-half, half + 1)[None, :]) % n
    return int(np.argmax(best[idx].min(axis=1)))


def _start_states(evidence, col: int, count: int, k: int, half: int = 3):
    n = evidence.shape[0]
    idx = (col + np.arange(-half, half + 1)) % n
    sc = evidence[idx].sum(axis=0)
    order = np.argsort(-sc, kind="stable")
    picked = []
    for s in order:
        if sc[s] < -1e8 or len(picked) >= count:
            break
        if all(s // k != t // k or abs(int(s) - int(t)) > 2 for t in picked):
            picked.append(int(s))
    return picked


def _backtrack(back, partner, how, start: int, m: int):
    """Wall states of one closed path in azimuth order, starting with ``start``."""
    n = back.shape[0]
    closes = bool(how[m])
    s = int(partner[0, start]) if closes else start
    m -= int(closes)
    states = [s]
    for c in range(n - 1, 0, -1):
        if back[c, m, s]:
            s = int(partner[c, s])
            m -= 1
            states.append(s)
    if s != start:
        return None
    states.reverse()
    # without a junction at the closing boundary the last wall is the first one
    return states if closes else states[:-1]


def _path_polygon(walls, ps: PolarStates, min_wall_rad: float = 0.0) -> np.ndarray | None:
    n = len(walls)
    if n < 4:
        return None
    poly = []
    for i in range(n):
        a, b = walls[i], walls[(i + 1) % n]
        if ps.axis[a] == ps.axis[b]:
            return None
        y, x = (ps.value[a], ps.value[b]) if ps.axis[a] == 0 else (ps.value[b], ps.value[a])
        poly.append((x, y))
    poly = np.array(poly)
    if signed_area(poly) <= 0 or not is_simple_polygon(poly) or not point_in_polygon((0.0, 0.0), poly):
        return None
    if wall_angles(poly).min() < min_wall_rad:
        return None
    k = int(np.lexsort((poly[:, 1], poly[:, 0]))[0])
    return np.roll(poly, -k, axis=0)


def best_ceiling_ratio(polygon, frame: ManhattanFrame, edge_vals, lo: float = 0.1, hi: float = 10.0) -> float:
    """Ceiling ratio whose ceiling outline collects the most edge probability (coarse then fine grid)."""
    grid = EquirectGrid(edge_vals.shape[1], edge_vals.shape[0])
    poly = np.asarray(polygon, dtype=np.float64)
    t = np.linspace(0.0, 1.0, 32, endpoint=False)[:, None, None]
    pts = (poly[None] * (1 - t) + np.roll(poly, -1, axis=0)[None] * t).reshape(-1, 2)

    def collect(ratios):
        vals = []
        for r in ratios:
            u, v = bearing_to_pixel(_plan_bearings(pts, r, frame), grid)
            vals.append(float(sample_bilinear(edge_vals, u, v).sum()))
        return int(np.argmax(vals))

    coarse = np.geomspace(lo, hi, 120)
    r0 = coarse[collect(coarse)]
    step = coarse[1] / coarse[0]
    fine = r0 * np.geomspace(1 / step, step, 21)
    return float(fine[collect(fine)])


def polar_paths(ps: PolarStates, evidence, partner, bonus, max_corners: int, starts: int,
                min_wall_rad: float = 0.0):
    """Best closed wall sequence for each even corner count, over several start states.

    Returns a list of ``(score, polygon)``.
    """
    c0 = _start_column(evidence)
    order = (c0 + np.arange(ps.n_cols)) % ps.n_cols
    ev, pa, bo = evidence[order], partner[order], bonus[order]
    out = []
    for s0 in _start_states(evidence, c0, starts, ps.k):
        final, how, back = kernels.polar_dp(np.ascontiguousarray(ev), np.ascontiguousarray(pa),
                                            np.ascontiguousarray(bo), s0, max_corners)
        for m in range(4, max_corners + 1, 2):
            if final[m] < -1e8:
                continue
            walls = _backtrack(back, pa, how, s0, m)
            if walls is None:
                continue
            poly = _path_polygon(walls, ps, min_wall_rad)
            if poly is not None:
                out.append((float(final[m]), poly))
    return out


def search_yaw(edge, frame: ManhattanFrame, cfg: "SolverConfig") -> tuple[ManhattanFrame, bool]:
    """Check a frame's yaw against the map, replacing it when another yaw fits much better.

    Yaws about the frame's vertical axis are tried in steps of one column of
    a coarse polar grid over a quarter turn; each is scored by the best
    floor-only outline.  The frame is kept when the winner lies within one
    step of it.  Returns ``(frame, replaced)``.
    """
    edge_vals = as_array(edge)
    coarse = SolverConfig(azimuth_bins=cfg.yaw_bins, offset_bins=cfg.yaw_offset_bins,
                          min_offset=cfg.min_offset, max_offset=cfg.max_offset)
    ps = PolarStates(frame, coarse)
    base = ps.aligned(edge_vals)
    partner, _ = ps.junctions(base, base, 1.0, 0.0)
    bonus = np.zeros(partner.shape)
    steps = ps.n_cols // 4
    scores = np.full(steps, -np.inf)
    for q in range(steps):
        ev = ps.evidence(np.roll(base, -2 * q, axis=0), None)
        c0 = _start_column(ev)
        order = (c0 + np.arange(ps.n_cols)) % ps.n_cols
        s0 = _start_states(ev, c0, 1, ps.k)
        if not s0:
            continue
        final, _, _ = kernels.polar_dp(np.ascontiguousarray(ev[order]), np.ascontiguousarray(partner[order]),
                                       bonus, s0[0], cfg.max_corners)
        scores[q] = final.max()
    best = int(np.argmax(scores))
    if min(best, steps - best) <= 1:
        return frame, False
    yaw = best * 2 * np.pi / ps.n_cols
    return ManhattanFrame(frame.matrix @ rotation_z(yaw)), True


def make_hypothesis(polygon, ceiling_z: float, frame: ManhattanFrame, corner_vals,
                    candidates=(), match_rad: float = 0.06) -> LayoutHypothesis:
    """Build the two rings, their edges and corner scores for a plan polygon."""
    poly = np.asarray(polygon, dtype=np.float64)
    n = len(poly)
    grid = EquirectGrid(corner_vals.shape[1], corner_vals.shape[0])
    top = _plan_bearings(poly, ceiling_z, frame)
    bot = _plan_bearings(poly, -1.0, frame)
    u, v = bearing_to_pixel(np.vstack([top, bot]), grid)
    scores = np.maximum(sample_bilinear(corner_vals, u, v), 0.0)
    cand_b = np.array([c.bearing for c in candidates]) if len(candidates) else np.zeros((0, 3))
    cos_match = np.cos(match_rad)
    corners = []
    for k, b in enumerate(np.vstack([top, bot])):
        synthetic = not (len(cand_b) and (cand_b @ b).max() >= cos_match)
        kind = CornerKind.CEILING if k < n else CornerKind.FLOOR
        corners.append(CornerCandidate(b, (float(u[k]), float(v[k])), kind, (-1, -1), float(scores[k]), synthetic))
    edges = [(top[i], top[(i + 1) % n]) for i in range(n)]
    edges += [(bot[i], bot[(i + 1) % n]) for i in range(n)]
    edges += [(bot[i], top[i]) for i in range(n)]
    return LayoutHypothesis(poly, float(ceiling_z), frame, tuple(corners), tuple(edges))


def generate_hypotheses(candidates, segments, frame: ManhattanFrame, edge, corner,
                        cfg: SolverConfig = SolverConfig()) -> list[LayoutHypothesis]:
    """Closed Manhattan rooms consistent with the edge map.

    Seen from a camera that faces every wall, the floor outline is a single
    valued function of azimuth built from ``x = const`` and ``y = const``
    pieces that meet where their distances agree.  A cyclic dynamic
    programme over azimuth columns and quantised wall planes finds, for
    each even corner count up to ``cfg.max_corners``, the outline whose
    floor and ceiling lines collect the most edge probability, with a bonus
    for vertical edges and corner blobs at junctions.  The ceiling height
    is read off the edge map along the best floor-only outline first.  Room corners without a matching line
    intersection candidate are flagged synthetic.  Output is ordered by
    summed corner score and truncated to ``cfg.max_hypotheses``.

    Raises:
        SolverError: If no closed room can be formed.
    """
    segs = list(segments)
    edge_vals = as_array(edge)
    corner_vals = as_array(corner)
    ps = PolarStates(frame, cfg)
    edge_al = ps.aligned(edge_vals)
    corner_al = ps.aligned(corner_vals)
    # the ceiling height is read off the map along a floor-only outline
    if not edge_al.max() > 0:
        raise SolverError("edge map carries no evidence")
    partner, _ = ps.junctions(edge_al, corner_al, 1.0, 0.0)
    floor_only = polar_paths(ps, ps.evidence(edge_al, None), partner, np.zeros(partner.shape), cfg.max_corners, 1)
    if not floor_only:
        raise SolverError("no closed outline fits the floor edges")
    ratio = best_ceiling_ratio(max(floor_only, key=lambda t: t[0])[1], frame, edge_vals)
    evidence = ps.evidence(edge_al, ratio)
    partner, bonus = ps.junctions(edge_al, corner_al, ratio, cfg.junction_weight)
    paths = polar_paths(ps, evidence, partner, bonus, cfg.max_corners, cfg.dp_starts, cfg.min_wall_rad)
    seen = set()
    hyps = []
    for _, poly in sorted(paths, key=lambda t: -t[0]):
        key = tuple(np.round(poly, 9).reshape(-1))
        if key in seen:
            continue
        seen.add(key)
        hyps.append(make_hypothesis(poly, ratio, frame, corner_vals, candidates, cfg.corner_match_rad))
    if not hyps:
        raise SolverError("no closed room could be formed")
    hyps.sort(key=lambda h: (-sum(c.score for c in h.corners), h.n_corners, h.canonical_key()))
    return hyps[:cfg.max_hypotheses]


# -- scoring and selection ---------------------------------------------------------------

class ArcCache:
    """Memoised rasterisation of hypothesis edges (many hypotheses share arcs)."""

    def __init__(self, grid: EquirectGrid):
        self.grid = grid
        self._cache: dict = {}

    def pixels(self, a, b) -> np.ndarray:
        key = (tuple(np.round(a, 12)), tuple(np.round(b, 12)))
        px = self._cache.get(key)
        if px is None:
            px = arc_pixels(a, b, self.grid)
            self._cache[key] = px
        return px

    def union(self, edges) -> np.ndarray:
        return np.unique(np.concatenate([self.pixels(a, b) for a, b in edges]))


def score_hypothesis(h: LayoutHypothesis, edge, corner, w_e: float | None = None, w_c: float | None = None,
                     cache: ArcCache | None = None) -> HypothesisScore:
    """Edge probability summed over the (de-duplicated) pixels of every arc
    plus corner probability sampled at every corner.

    With the weights left as ``None`` each term becomes a mean: ``w_e`` is one
    over the rasterised pixel count and ``w_c`` one over the corner count.
    """
    e = as_array(edge)
    c = as_array(corner)
    if e.shape != c.shape:
        raise SolverError("edge and corner maps must share one grid")
    grid = EquirectGrid(e.shape[1], e.shape[0])
    cache = cache or ArcCache(grid)
    px = cache.union(h.edges)
    edge_term = float(e.reshape(-1)[px].sum())
    cs = h.corner_set
    corner_term = float(sample_bilinear(c, cs[:, 0], cs[:, 1]).sum()) if len(cs) else 0.0
    w_e = 1.0 / max(len(px), 1) if w_e is None else float(w_e)
    w_c = 1.0 / max(len(cs), 1) if w_c is None else float(w_c)
    return HypothesisScore(edge_term, corner_term, w_e, w_c)


def select_best(hypotheses, edge, corner, cfg: SolverConfig = SolverConfig()):
    """Highest-scoring hypothesis; ties go to fewer corners, then canonical order.

    Returns ``(index, hypothesis, score)``.
    """
    hyps = list(hypotheses)
    if not hyps:
        raise SolverError("no hypotheses to select from")
    e = as_array(edge)
    cache = ArcCache(EquirectGrid(e.shape[1], e.shape[0]))
    scores = [score_hypothesis(h, edge, corner, cache=cache) for h in hyps]
    best = min(range(len(hyps)), key=lambda i: (-scores[i].total, hyps[i].n_corners, hyps[i].canonical_key()))
    return best, hyps[best], scores[best]


# -- metric model ---------------------------------------------------------------------------

def _snap(poly: np.ndarray) -> np.ndarray:
    """Axis-align a nearly rectilinear polygon by averaging each edge's shared coordinate."""
    n = len(poly)
    out = poly.copy()
    d = np.roll(poly, -1, axis=0) - poly
    horiz = np.abs(d[:, 1]) <= np.abs(d[:, 0])
    for i in range(n):
        j = (i + 1) % n
        k = 1 if horiz[i] else 0
        m = 0.5 * (out[i, k] + out[j, k])
        out[i, k] = out[j, k] = m
    return out


def lift_to_3d(h: LayoutHypothesis, frame: ManhattanFrame | None = None, camera_height: float = 1.0) -> LayoutModel:
    """Metric room from a hypothesis and the camera height.

    Floor corner rays are cut with the plane ``z = -camera_height``; the
    ceiling height is the median over the ceiling corners of the height at
    which each ray meets the vertical above its floor corner.

    Raises:
        GeometryError: If a floor corner ray does not point below the horizon.
    """
    if camera_height <= 0:
        raise ValueError("camera_height must be positive")
    frame = frame or h.frame
    n = h.n_corners
    top = frame.to_frame(np.array([c.bearing for c in h.corners[:n]]))
    bot = frame.to_frame(np.array([c.bearing for c in h.corners[n:]]))
    if np.any(bot[:, 2] >= 0):
        raise GeometryError("a floor corner ray points at or above the horizon")
    poly = camera_height * bot[:, :2] / -bot[:, 2:3]
    poly = _snap(poly)
    r = np.hypot(poly[:, 0], poly[:, 1])
    rt = np.hypot(top[:, 0], top[:, 1])
    cz = float(np.median(r * top[:, 2] / np.maximum(rt, 1e-12)))
    if cz <= 0:
        raise GeometryError("ceiling ring lies below the camera")
    if signed_area(poly) < 0:
        poly = poly[::-1]
    return LayoutModel(poly, -camera_height, cz, frame)


# -- continuous refinement against the edge map ------------------------------------------------

def _edge_walls(poly: np.ndarray):
    """Per polygon edge: 1 if it runs along x (y constant), and that constant."""
    d = np.roll(poly, -1, axis=0) - poly
    along_x = np.abs(d[:, 1]) <= np.abs(d[:, 0])
    coord = np.where(along_x, poly[:, 1], poly[:, 0])
    return along_x, coord


def _rebuild(along_x, coord):
    prev = np.roll(coord, 1)
    x = np.where(along_x, prev, coord)
    y = np.where(along_x, coord, prev)
    return np.column_stack([x, y])


def _model_points(along_x, coord, cz, floor_z, rot):
    poly = _rebuild(along_x, coord)
    n = len(poly)
    pts = np.vstack([np.column_stack([poly, np.full(n, cz)]), np.column_stack([poly, np.full(n, floor_z)])])
    return pts @ rot.T


def _edge_index(n):
    ia = np.concatenate([np.arange(n), n + np.arange(n), n + np.arange(n)])
    ib = np.concatenate([(np.arange(n) + 1) % n, n + (np.arange(n) + 1) % n, np.arange(n)])
    return ia, ib


class _WireFit:
    """Least-squares fit of the projected room wireframe to edge-map pixels.

    Each pixel above the threshold is assigned to the nearest projected
    edge when it lies within ``band_rad`` of it and its projection falls
    inside the arc (minus ``end_margin_rad`` at both ends, where edges
    meet).  The residual of a pixel is ``sqrt(value) * (n . p)`` with ``n``
    the unit normal of its edge's great circle, so the fit pulls every
    circle onto the value-weighted centre line of its band.
    """

    def __init__(self, model: LayoutModel, edge_vals: np.ndarray, threshold: float, band_rad: float,
                 end_margin_rad: float, level: bool = False):
        grid = EquirectGrid(edge_vals.shape[1], edge_vals.shape[0])
        rows, cols = np.nonzero(edge_vals >= threshold)
        from .sphere import grid_bearings
        self.pts = grid_bearings(grid)[rows, cols]
        self.sw = np.sqrt(edge_vals[rows, cols])
        self.along_x, self.coord0 = _edge_walls(model.floor_polygon)
        self.floor_z = model.floor_z
        self.cz0 = model.ceiling_z
        self.r0 = model.frame.matrix
        self.ia, self.ib = _edge_index(model.n_corners)
        self.band = np.sin(band_rad)
        self.margin = end_margin_rad
        self.level = level
        # rotation: a yaw about the vertical for a levelled camera, else a rotation vector
        self.scale = np.concatenate([np.maximum(np.abs(self.coord0), 0.05), [self.cz0], [1.0] * (1 if level else 3)])
        self.assign = None

    def unpack(self, x):
        p = x * self.scale
        n = len(self.coord0)
        if self.level:
            rot = rotation_z(p[n + 1]) @ self.r0
        else:
            rot = Rotation.from_rotvec(p[n + 1:]).as_matrix() @ self.r0
        return self.coord0 + p[:n], self.cz0 + p[n], rot

    def normals(self, x):
        coord, cz, rot = self.unpack(x)
        c = _model_points(self.along_x, coord, cz, self.floor_z, rot)
        a, b = c[self.ia], c[self.ib]
        nrm = np.cross(a, b)
        return nrm / np.linalg.norm(nrm, axis=1, keepdims=True), normalize(a), normalize(b)

    def reassign(self, x) -> int:
        nrm, a, b = self.normals(x)
        d = self.pts @ nrm.T                                   # (P, E) signed sines
        # position along each arc: inside when both ends see the pixel on the inner side
        inside_a = np.einsum("pk,ek->pe", self.pts, np.cross(nrm, a)) >= np.sin(self.margin)
        inside_b = np.einsum("pk,ek->pe", self.pts, np.cross(b, nrm)) >= np.sin(self.margin)
        ok = inside_a & inside_b & (np.abs(d) <= self.band)
        dist = np.where(ok, np.abs(d), np.inf)
        best = np.argmin(dist, axis=1)
        keep = np.isfinite(dist[np.arange(len(best)), best])
        self.sel = np.flatnonzero(keep)
        self.assign = best[keep]
        return len(self.sel)

    def residuals(self, x):
        nrm, _, _ = self.normals(x)
        p = self.pts[self.sel]
        return self.sw[self.sel] * np.einsum("pk,pk->p", p, nrm[self.assign])


def refine_layout(model: LayoutModel, edge, threshold: float = 0.1, band_rad: float = 0.08,
                  end_margin_rad: float = 0.04, rounds: int = 8, level: bool = False) -> LayoutModel:
    """Fine-tune wall positions, ceiling height and frame rotation on the edge map.

    The room topology and the floor height (camera height) stay fixed; with
    ``level`` the rotation is restricted to a yaw.  A few rounds alternate
    pixel-to-edge assignment with a least-squares solve.  The start is
    returned if the fit degenerates into an invalid room.
    """
    from scipy.optimize import least_squares

    fit = _WireFit(model, as_array(edge), threshold, band_rad, end_margin_rad, level)
    x = np.zeros(len(fit.scale))
    prev = None
    # start with a wide capture band and narrow it as the fit settles
    for band in np.geomspace(2.0 * band_rad, band_rad, rounds // 2).tolist() + [band_rad] * (rounds - rounds // 2):
        fit.band = np.sin(band)
        if fit.reassign(x) < len(x) + 1:
            return model
        key = (band, fit.sel.tobytes(), fit.assign.tobytes())
        if key == prev:
            break
        prev = key
        res = least_squares(fit.residuals, x, method="lm", xtol=1e-10, ftol=1e-10)
        if not np.all(np.isfinite(res.x)):
            return model
        x = res.x
    coord, cz, rot = fit.unpack(x)
    poly = _rebuild(fit.along_x, coord)
    try:
        frame = ManhattanFrame(rot)
        if signed_area(poly) < 0:
            poly = poly[::-1]
        out = LayoutModel(poly, model.floor_z, cz, frame)
        out.validate()
    except (GeometryError, ValueError):
        return model
    return out


# -- pipeline ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class Reconstruction:
    model: LayoutModel
    hypothesis: LayoutHypothesis
    score: HypothesisScore
    lines: LineResult
    n_hypotheses: int
    candidates: list = field(default_factory=list)


# RANSAC only seeds the frame in the pipeline; the final lines come from the sweep
PIPELINE_RANSAC = RansacConfig(max_lines=8)


def reconstruct(edge: ProbabilityMap, corner: ProbabilityMap, ransac: RansacConfig | None = None,
                cfg: SolverConfig = SolverConfig()) -> Reconstruction:
    """Edge and corner maps in, metric room out.

    ``ransac`` defaults to :data:`PIPELINE_RANSAC`.

    Raises:
        SolverError: When lines, frame or hypotheses cannot be established.
    """
    if edge.grid != corner.grid:
        raise SolverError("edge and corner maps must share one grid")
    ransac = PIPELINE_RANSAC if ransac is None else ransac
    if cfg.denoise:
        edge, corner = suppress_background(edge), suppress_background(corner)
    try:
        lines = extract_lines(edge, ransac, level=cfg.level)
        frame, moved = search_yaw(edge, lines.frame, cfg)
        if moved:
            samples = extract_edge_pixels(edge, ransac.edge_threshold)
            lines = lines_in_frame(edge, samples, frame, ransac, passes=2, level=cfg.level)
    except (FrameError, DegenerateFitError, ExtractionError) as exc:
        raise SolverError(f"line extraction failed: {exc}") from exc
    cands = candidate_corners(lines.segments, corner, lines.frame, cfg.span_slack_rad)
    hyps = generate_hypotheses(cands, lines.segments, lines.frame, edge, corner, cfg)
    _, best, score = select_best(hyps, edge, corner, cfg)
    model = lift_to_3d(best, lines.frame, cfg.camera_height)
    if cfg.refine:
        model = refine_layout(model, edge, level=cfg.level)
    return Reconstruction(model, best, score, lines, len(hyps), cands)
