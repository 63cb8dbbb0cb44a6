"""Random Manhattan rooms and map corruption for closed-loop experiments."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import GenerationError
from .layout import LayoutModel, rectilinear_ccw, wall_angles, wall_distances
from .maps import ProbabilityMap
from .sphere import ManhattanFrame

VALID_CORNER_COUNTS = (4, 6, 8, 10, 12)
MAX_TRIES = 10_000
# camera draws per polygon before a fresh polygon is drawn
_CAMERA_TRIES = 200

# a step edge shorter than this fraction of the room side is not generated
_MIN_STEP_FRACTION = 0.15
# the staircase carved at one rectangle corner stays inside this fraction of each side
_QUADRANT_FRACTION = 0.45


@dataclass(frozen=True)
class RoomSpec:
    """Parameters of one synthetic room.

    Lengths are in metres; with the default ``camera_height = 1`` they are
    simply in camera-height units.  ``height_range`` bounds the floor to
    ceiling distance.
    """

    corner_count: int = 4
    extent_range: tuple[float, float] = (2.0, 5.0)
    height_range: tuple[float, float] = (1.6, 2.2)
    camera_height: float = 1.0
    seed: int = 0
    # minimum distance between the camera and any wall plane (camera in front of all walls)
    wall_clearance: float = 0.35
    # every wall must span at least this azimuth range seen from the camera
    min_wall_angle_deg: float = 10.0

    def __post_init__(self):
        if self.corner_count not in VALID_CORNER_COUNTS:
            raise ValueError(f"corner_count must be one of {VALID_CORNER_COUNTS}, got {self.corner_count}")
        lo, hi = self.extent_range
        if not 0 < lo <= hi:
            raise ValueError("extent_range must be positive and ordered")
        lo, hi = self.height_range
        if not 0 < lo <= hi:
            raise ValueError("height_range must be positive and ordered")
        if not 0 <= self.min_wall_angle_deg < 90:
            raise ValueError("min_wall_angle_deg must lie in [0, 90)")
        if not 0 < self.camera_height < self.height_range[0]:
            raise ValueError("camera must sit strictly between floor and ceiling")


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    spurious_edge_fraction: float = 0.0
    dropout_fraction: float = 0.0

    def __post_init__(self):
        for name in ("gaussian_sigma", "spurious_edge_fraction", "dropout_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return self.gaussian_sigma == 0 and self.spurious_edge_fraction == 0 and self.dropout_fraction == 0


def _increasing(rng, k, lo, hi, min_gap):
    """``k`` sorted values in ``(lo, hi)`` with neighbouring gaps >= ``min_gap``."""
    slack = (hi - lo) - (k + 1) * min_gap
    if slack < 0:
        raise GenerationError("room side too short for the requested steps")
    cuts = np.sort(rng.uniform(0.0, slack, size=k))
    return lo + min_gap * np.arange(1, k + 1) + cuts


def _staircase_polygon(rng, sx, sy, steps_per_corner) -> np.ndarray:
    """Rectangle ``[0,sx] x [0,sy]`` with staircase notches carved at its corners.

    A staircase of ``s`` steps replaces one rectangle vertex by ``2s + 1``
    vertices, so the result has ``4 + 2 * sum(steps)`` vertices.
    """
    gap_x = _MIN_STEP_FRACTION * sx
    gap_y = _MIN_STEP_FRACTION * sy
    qx, qy = _QUADRANT_FRACTION * sx, _QUADRANT_FRACTION * sy
    # (corner point, direction along x into the room, direction along y into the room)
    corners = [((0.0, 0.0), 1, 1), ((sx, 0.0), -1, 1), ((sx, sy), -1, -1), ((0.0, sy), 1, -1)]
    verts = []
    for (cx, cy), dx, dy, s in ((*c, s) for c, s in zip(corners, steps_per_corner)):
        if s == 0:
            verts.append([(cx, cy)])
            continue
        xs = _increasing(rng, s, 0.0, qx, gap_x)          # distances from the corner along x
        ys = _increasing(rng, s, 0.0, qy, gap_y)[::-1]    # decreasing distances along y
        # local staircase in "corner at origin, room towards +x/+y" coordinates
        pts = [(0.0, ys[0])]
        for i in range(s):
            y_next = ys[i + 1] if i + 1 < s else 0.0
            pts.append((xs[i], ys[i]))
            pts.append((xs[i], y_next))
        local = np.array(pts)
        world = np.column_stack([cx + dx * local[:, 0], cy + dy * local[:, 1]])
        # corners with dx*dy < 0 are traversed in the reverse direction
        if dx * dy < 0:
            world = world[::-1]
        verts.append([tuple(p) for p in world])
    poly = np.array([p for group in verts for p in group])
    return rectilinear_ccw(poly)


def sample_room(spec: RoomSpec) -> LayoutModel:
    """Random simple rectilinear room with ``spec.corner_count`` corners.

    Each of ``(corner_count - 4) / 2`` distinct rectangle corners gets one
    notch.  The camera is placed by rejection sampling at a point that sees
    every wall from the front (the polygon's kernel), keeps
    ``spec.wall_clearance`` from every wall plane and sees every wall over at
    least ``spec.min_wall_angle_deg`` of azimuth; a polygon
    that admits no such point is redrawn.  The polygon is translated so the
    camera sits at the origin, and the Manhattan frame gets a random yaw.

    Raises:
        GenerationError: If no admissible camera position is found.
    """
    rng = np.random.default_rng(spec.seed)
    k = (spec.corner_count - 4) // 2
    room_h = rng.uniform(*spec.height_range)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    lo, hi = spec.extent_range
    min_angle = np.radians(spec.min_wall_angle_deg)
    clear = spec.wall_clearance
    tries = 0
    while tries < MAX_TRIES:
        # one step at each of k distinct rectangle corners
        steps = np.zeros(4, dtype=np.int64)
        steps[rng.permutation(4)[:k]] = 1
        sx, sy = rng.uniform(lo, hi, size=2)
        poly = _staircase_polygon(rng, sx, sy, steps)
        for _ in range(_CAMERA_TRIES):
            tries += 1
            c = rng.uniform([0.0, 0.0], [sx, sy])
            if wall_distances(poly - c).min() < clear:
                continue
            if wall_angles(poly - c).min() >= min_angle:
                model = LayoutModel(poly - c, -spec.camera_height, room_h - spec.camera_height,
                                    ManhattanFrame.from_yaw(yaw))
                model.validate()
                return model
    raise GenerationError("could not place the camera inside the room")


def corpus_corner_count(rng, complex_only: bool = False, counts=(4, 6, 8, 10)) -> int:
    """Corner count for one corpus room: 60 % boxes unless ``complex_only``."""
    complex_counts = [c for c in counts if c > 4]
    if complex_only or 4 not in counts:
        return int(rng.choice(complex_counts))
    return 4 if rng.random() < 0.6 else int(rng.choice(complex_counts))


def room_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def corpus_specs(n_rooms: int, seed: int = 0, complex_only: bool = False, corner_counts=(4, 6, 8, 10),
                 base: RoomSpec | None = None) -> list[RoomSpec]:
    """Per-room specs of a corpus; room ``i`` uses seed ``seed ^ i``."""
    base = base or RoomSpec()
    out = []
    for i in range(n_rooms):
        s = room_seed(seed, i)
        cc = corpus_corner_count(np.random.default_rng([s, 1]), complex_only, corner_counts)
        out.append(replace(base, corner_count=cc, seed=s))
    return out


def corrupt_maps(edge: ProbabilityMap, corner: ProbabilityMap, noise: NoiseSpec, seed: int = 0,
                 structure_threshold: float = 0.5, background_threshold: float = 1e-3):
    """Degrade a clean map pair the way an imperfect network would.

    Each map independently gets: a fraction of structure pixels
    (``>= structure_threshold``) zeroed, a fraction of background pixels
    (``<= background_threshold``) set to uniform values in ``[0.3, 1]``, and
    additive Gaussian noise; results are clamped to ``[0, 1]``.
    """
    if noise.is_zero:
        return edge, corner
    out = []
    for m, rng in zip((edge, corner), np.random.default_rng(seed).spawn(2)):
        clean = m.values.astype(np.float64)
        vals = clean.copy()
        if noise.dropout_fraction > 0:
            idx = np.flatnonzero(clean >= structure_threshold)
            k = int(round(noise.dropout_fraction * idx.size))
            vals.flat[rng.choice(idx, size=k, replace=False)] = 0.0
        if noise.spurious_edge_fraction > 0:
            idx = np.flatnonzero(clean <= background_threshold)
            k = int(round(noise.spurious_edge_fraction * idx.size))
            vals.flat[rng.choice(idx, size=k, replace=False)] = rng.uniform(0.3, 1.0, size=k)
        if noise.gaussian_sigma > 0:
            vals = vals + rng.normal(0.0, noise.gaussian_sigma, size=vals.shape)
        out.append(m.with_values(np.clip(vals, 0.0, 1.0)))
    return out[0], out[1]
