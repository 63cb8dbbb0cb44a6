"""Manhattan room model, its projections and the PRLAYOUT1 text format."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError, MapFormatError
from .sphere import EquirectGrid, ManhattanFrame, bearing_to_pixel

FORMAT_TAG = "PRLAYOUT1"
DEFAULT_PIXEL_GRID = EquirectGrid(256, 128)


# -- planar polygon helpers ---------------------------------------------------

def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def point_in_polygon(pt, poly) -> bool:
    """Even-odd rule; points exactly on the boundary count as outside."""
    return distance_to_boundary(pt, poly) > 0 and _crossings(pt, poly) % 2 == 1


def _crossings(pt, poly) -> int:
    x, y = float(pt[0]), float(pt[1])
    p = np.asarray(poly, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    cond = (p[:, 1] > y) != (q[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = p[:, 0] + (y - p[:, 1]) * (q[:, 0] - p[:, 0]) / (q[:, 1] - p[:, 1])
    return int(np.count_nonzero(cond & (x < xi)))


def distance_to_boundary(pt, poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    d = q - p
    rel = np.asarray(pt, dtype=np.float64)[None, :] - p
    L2 = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", rel, d) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    closest = p + t[:, None] * d
    return float(np.min(np.linalg.norm(np.asarray(pt)[None, :] - closest, axis=1)))


def wall_distances(poly) -> np.ndarray:
    """Signed distance from the origin to each edge line, positive on the inner side.

    All entries are positive exactly when the origin lies in the kernel of
    the (counter-clockwise) polygon, i.e. it sees every wall from the front.
    """
    p = np.asarray(poly, dtype=np.float64)
    d = np.roll(p, -1, axis=0) - p
    return (d[:, 0] * -p[:, 1] - d[:, 1] * -p[:, 0]) / np.linalg.norm(d, axis=1)


def wall_angles(poly) -> np.ndarray:
    """Azimuth range (radians) each polygon edge spans seen from the origin."""
    p = np.asarray(poly, dtype=np.float64)
    q = np.roll(p, -1, axis=0)
    cross = p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]
    dot = np.einsum("ij,ij->i", p, q)
    return np.abs(np.arctan2(cross, dot))


def _segments_intersect(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    def on_seg(p, q, r):
        return min(p[0], q[0]) - 1e-12 <= r[0] <= max(p[0], q[0]) + 1e-12 and \
            min(p[1], q[1]) - 1e-12 <= r[1] <= max(p[1], q[1]) + 1e-12

    o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and o1 * o2 != 0 and o3 * o4 != 0:
        return True
    eps = 1e-12
    return (abs(o1) <= eps and on_seg(a, b, c)) or (abs(o2) <= eps and on_seg(a, b, d)) or \
        (abs(o3) <= eps and on_seg(c, d, a)) or (abs(o4) <= eps and on_seg(c, d, b))


def is_simple_polygon(poly) -> bool:
    """True when no two non-adjacent edges touch and no edge is degenerate."""
    p = np.asarray(poly, dtype=np.float64)
    n = len(p)
    if n < 3:
        return False
    edges = [(p[i], p[(i + 1) % n]) for i in range(n)]
    if any(np.allclose(a, b, atol=1e-12) for a, b in edges):
        return False
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def is_rectilinear(poly, tol: float = 1e-9) -> bool:
    """Every edge is parallel to x or y and consecutive edges alternate."""
    p = np.asarray(poly, dtype=np.float64)
    d = np.roll(p, -1, axis=0) - p
    scale = max(float(np.abs(p).max()), 1.0)
    horiz = np.abs(d[:, 1]) <= tol * scale
    vert = np.abs(d[:, 0]) <= tol * scale
    if not np.all(horiz ^ vert):
        return False
    return bool(np.all(horiz != np.roll(horiz, -1)))


# -- the model ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LayoutModel:
    """Closed Manhattan room seen from a camera at the origin.

    ``floor_polygon`` holds ``(x, y)`` vertices in frame coordinates,
    counter-clockwise, with axis-aligned edges.  The walls are vertical
    between ``floor_z < 0`` and ``ceiling_z > 0``.
    """

    floor_polygon: np.ndarray
    floor_z: float
    ceiling_z: float
    frame: ManhattanFrame = field(default_factory=ManhattanFrame.identity)

    def __post_init__(self):
        poly = np.array(self.floor_polygon, dtype=np.float64).reshape(-1, 2)
        poly.setflags(write=False)
        object.__setattr__(self, "floor_polygon", poly)
        object.__setattr__(self, "floor_z", float(self.floor_z))
        object.__setattr__(self, "ceiling_z", float(self.ceiling_z))

    @property
    def n_corners(self) -> int:
        return len(self.floor_polygon)

    @property
    def camera_height(self) -> float:
        return -self.floor_z

    @property
    def height(self) -> float:
        return self.ceiling_z - self.floor_z

    def validate(self, tol: float = 1e-9) -> None:
        """Raise :class:`GeometryError` unless every model invariant holds."""
        poly = self.floor_polygon
        if len(poly) < 4 or len(poly) % 2:
            raise GeometryError(f"Manhattan polygon needs an even vertex count >= 4, got {len(poly)}")
        if not (self.floor_z < 0 < self.ceiling_z):
            raise GeometryError("need floor_z < 0 < ceiling_z")
        if not is_rectilinear(poly, tol):
            raise GeometryError("polygon edges are not axis aligned")
        if not is_simple_polygon(poly):
            raise GeometryError("polygon is self-intersecting")
        if signed_area(poly) <= 0:
            raise GeometryError("polygon must be counter-clockwise")
        if not point_in_polygon((0.0, 0.0), poly):
            raise GeometryError("camera is not strictly inside the room")

    def is_valid(self) -> bool:
        try:
            self.validate()
        except GeometryError:
            return False
        return True

    # frame-coordinate geometry
    def corners_frame(self) -> np.ndarray:
        """``(2n, 3)`` corners in frame coordinates: ceiling ring then floor ring."""
        n = self.n_corners
        top = np.column_stack([self.floor_polygon, np.full(n, self.ceiling_z)])
        bot = np.column_stack([self.floor_polygon, np.full(n, self.floor_z)])
        return np.vstack([top, bot])

    def corners_world(self) -> np.ndarray:
        return self.frame.to_world(self.corners_frame())

    def edges_world(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Structural 3D edges: ceiling ring, floor ring, then wall-wall verticals."""
        c = self.corners_world()
        n = self.n_corners
        edges = []
        for i in range(n):
            edges.append((c[i], c[(i + 1) % n]))
        for i in range(n):
            edges.append((c[n + i], c[n + (i + 1) % n]))
        for i in range(n):
            edges.append((c[n + i], c[i]))
        return edges

    def corner_pixels(self, grid: EquirectGrid) -> np.ndarray:
        u, v = bearing_to_pixel(self.corners_world(), grid)
        return np.column_stack([u, v])

    def scaled(self, s: float) -> "LayoutModel":
        return LayoutModel(self.floor_polygon * s, self.floor_z * s, self.ceiling_z * s, self.frame)

    def __eq__(self, other):
        return isinstance(other, LayoutModel) and self.frame == other.frame and \
            self.floor_z == other.floor_z and self.ceiling_z == other.ceiling_z and \
            np.array_equal(self.floor_polygon, other.floor_polygon)


def rectilinear_ccw(poly) -> np.ndarray:
    """Return ``poly`` reordered counter-clockwise (vertex order otherwise kept)."""
    p = np.asarray(poly, dtype=np.float64)
    return p if signed_area(p) > 0 else p[::-1].copy()


# -- PRLAYOUT1 -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_layout(model: LayoutModel, grid: EquirectGrid = DEFAULT_PIXEL_GRID) -> str:
    buf = io.StringIO()
    buf.write(f"{FORMAT_TAG}\n")
    buf.write("frame " + " ".join(_fmt(x) for x in model.frame.matrix.reshape(-1)) + "\n")
    buf.write(f"floor_z {_fmt(model.floor_z)}\n")
    buf.write(f"ceiling_z {_fmt(model.ceiling_z)}\n")
    buf.write(f"floor_polygon {model.n_corners}\n")
    for x, y in model.floor_polygon:
        buf.write(f"{_fmt(x)} {_fmt(y)}\n")
    px = model.corner_pixels(grid)
    buf.write(f"corner_pixels {len(px)} {grid.width} {grid.height}\n")
    for u, v in px:
        buf.write(f"{_fmt(u)} {_fmt(v)}\n")
    return buf.getvalue()


def loads_layout(text: str) -> LayoutModel:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    try:
        if lines[0] != FORMAT_TAG:
            raise MapFormatError(f"expected {FORMAT_TAG} header, got {lines[0]!r}")
        fields = {}
        i = 1
        while i < len(lines):
            key, *rest = lines[i].split()
            if key == "floor_polygon":
                n = int(rest[0])
                fields[key] = np.array([[float(t) for t in lines[i + 1 + k].split()] for k in range(n)])
                i += n + 1
            elif key == "corner_pixels":
                i += int(rest[0]) + 1
            else:
                fields[key] = [float(t) for t in rest]
                i += 1
        frame = ManhattanFrame(np.array(fields["frame"]).reshape(3, 3))
        return LayoutModel(fields["floor_polygon"], fields["floor_z"][0], fields["ceiling_z"][0], frame)
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, MapFormatError):
            raise
        raise MapFormatError(f"malformed layout document: {exc}") from exc


def save_layout(model: LayoutModel, path, grid: EquirectGrid = DEFAULT_PIXEL_GRID) -> None:
    Path(path).write_text(dumps_layout(model, grid), encoding="ascii")


def load_layout(path) -> LayoutModel:
    return loads_layout(Path(path).read_text(encoding="ascii"))
