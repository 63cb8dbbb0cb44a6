"""Equirectangular <-> sphere conversions, great circles and Manhattan frames.

Convention (used everywhere in the package):

* ``z`` points up, the camera sits at the origin.
* longitude ``theta = (u + 0.5) / W * 2pi - pi``, so the image centre looks
  along ``+x`` and ``u`` grows with longitude (towards ``+y``).
* latitude ``phi = pi/2 - (v + 0.5) / H * pi``, row 0 is the top.
* bearing ``= (cos(phi) cos(theta), cos(phi) sin(theta), sin(phi))``.

Integer pixel coordinates address pixel centres, so pixel ``i`` covers the
continuous interval ``[i - 0.5, i + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateFitError, DomainError, GeometryError

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class EquirectGrid:
    """Pixel dimensions of a full 360 x 180 degree panorama."""

    width: int
    height: int

    def __post_init__(self):
        if self.height < 4 or self.width < 8:
            raise DomainError(f"grid too small: {self.width}x{self.height}")
        if self.width != 2 * self.height:
            raise DomainError(f"equirectangular grid needs W = 2H, got {self.width}x{self.height}")

    @classmethod
    def from_height(cls, height: int) -> "EquirectGrid":
        return cls(2 * int(height), int(height))

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(H, W)``."""
        return (self.height, self.width)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def row_step(self) -> float:
        """Angular size of one pixel row, in radians."""
        return np.pi / self.height


def pixel_to_bearing(u, v, grid: EquirectGrid) -> np.ndarray:
    """Map continuous pixel coordinates to unit bearings.

    Args:
        u: Column coordinate(s), ``0 <= u < W``.
        v: Row coordinate(s), ``0 <= v < H``.
        grid: Panorama dimensions.

    Returns:
        Array of shape ``(..., 3)`` matching the broadcast shape of ``u, v``.

    Raises:
        DomainError: If any coordinate falls outside the image.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(u)) or np.any(~np.isfinite(v)):
        raise DomainError("non-finite pixel coordinate")
    if np.any(u < 0) or np.any(u >= grid.width) or np.any(v < 0) or np.any(v >= grid.height):
        raise DomainError("pixel coordinate outside the image")
    theta = (u + 0.5) / grid.width * 2.0 * np.pi - np.pi
    phi = np.pi / 2.0 - (v + 0.5) / grid.height * np.pi
    cphi = np.cos(phi)
    return np.stack([cphi * np.cos(theta), cphi * np.sin(theta), np.sin(phi)], axis=-1)


def bearing_to_pixel(b, grid: EquirectGrid) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`pixel_to_bearing`.

    ``u`` is wrapped into ``[0, W)``.  Rows are clamped to ``[0, H - 0.5]``:
    the north pole itself would land on ``v = -0.5`` and is pulled onto row 0.
    Bearings need not be exactly unit length; they are normalised first.
    """
    b = np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(b, axis=-1)
    x, y, z = (b[..., i] / norm for i in range(3))
    theta = np.arctan2(y, x)
    phi = np.arcsin(np.clip(z, -1.0, 1.0))
    w, h = grid.width, grid.height
    u = np.mod((theta + np.pi) / (2.0 * np.pi) * w - 0.5, w)
    u = np.where(w - u < 1e-9, 0.0, u)
    v = np.clip((np.pi / 2.0 - phi) / np.pi * h - 0.5, 0.0, h - 0.5)
    return u, v


def pixel_index(u, v, grid: EquirectGrid) -> tuple[np.ndarray, np.ndarray]:
    """Integer ``(col, row)`` of the pixel containing continuous ``(u, v)``."""
    col = np.mod(np.floor(np.asarray(u) + 0.5).astype(np.int64), grid.width)
    row = np.clip(np.floor(np.asarray(v) + 0.5).astype(np.int64), 0, grid.height - 1)
    return col, row


@lru_cache(maxsize=8)
def _grid_bearings(width: int, height: int) -> np.ndarray:
    grid = EquirectGrid(width, height)
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    out = pixel_to_bearing(u, v, grid)
    out.setflags(write=False)
    return out


def grid_bearings(grid: EquirectGrid) -> np.ndarray:
    """Bearings of every pixel centre, shape ``(H, W, 3)`` (read-only, cached)."""
    return _grid_bearings(grid.width, grid.height)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DomainError("cannot normalise a zero vector")
    return v / n


def canonical_normal(n) -> np.ndarray:
    """Flip ``n`` so that its first non-negligible component is positive."""
    n = normalize(n)
    for c in n:
        if abs(c) > 1e-12:
            return n if c > 0 else -n
    return n


@dataclass(frozen=True)
class GreatCircle:
    """Intersection of the unit sphere with a plane through its centre.

    The stored normal is canonical, so ``GreatCircle(n) == GreatCircle(-n)``.
    """

    normal: np.ndarray

    def __post_init__(self):
        n = canonical_normal(self.normal)
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)

    def __eq__(self, other):
        return isinstance(other, GreatCircle) and np.array_equal(self.normal, other.normal)

    def __hash__(self):
        return hash(self.normal.tobytes())

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Orthonormal ``(e1, e2)`` spanning the circle plane, with ``e1 x e2 = normal``."""
        n = self.normal
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = normalize(np.cross(helper, n))
        e2 = np.cross(n, e1)
        return e1, e2


def fit_great_circle(points, weights=None) -> GreatCircle:
    """Weighted least-squares great circle through ``points``.

    The normal is the eigenvector of the smallest eigenvalue of the weighted
    scatter matrix ``sum_i w_i p_i p_i^T``, i.e. the minimiser of
    ``sum_i w_i (n . p_i)^2``.

    Raises:
        DegenerateFitError: Fewer than two distinct directions carry weight.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(p):
        raise ValueError("points and weights differ in length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if len(p) < 2 or w.sum() <= 0:
        raise DegenerateFitError("need at least two weighted points")
    # accumulate in a canonical point order so the result ignores input order bit for bit
    order = np.lexsort((w, p[:, 2], p[:, 1], p[:, 0]))
    p, w = p[order], w[order]
    scatter = (p * w[:, None]).T @ p
    evals, evecs = np.linalg.eigh(scatter)
    # a single direction (or its antipode) gives a rank-1 scatter matrix
    if evals[1] <= 1e-12 * max(evals[2], 1e-300):
        raise DegenerateFitError("points do not span a plane")
    return GreatCircle(evecs[:, 0])


def angular_distance_to_circle(p, circle: GreatCircle):
    """Angle between ``p`` and the circle, ``|asin(n . p)|`` in ``[0, pi/2]``."""
    d = np.asarray(p, dtype=np.float64) @ circle.normal
    return np.abs(np.arcsin(np.clip(d, -1.0, 1.0)))


def slerp_arc(a, b, step: float) -> np.ndarray:
    """Points along the shorter arc from ``a`` to ``b`` spaced at most ``step`` radians."""
    a = normalize(a)
    b = normalize(b)
    ang = float(np.arccos(np.clip(a @ b, -1.0, 1.0)))
    n = max(int(np.ceil(ang / step)), 1) + 1
    if ang < 1e-12:
        return a[None, :].copy()
    t = np.linspace(0.0, 1.0, n)[:, None]
    s = np.sin(ang)
    return (np.sin((1.0 - t) * ang) * a + np.sin(t * ang) * b) / s


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class ManhattanFrame:
    """Rotation whose columns ``r1, r2, r3`` are the scene's principal directions.

    Frame coordinates ``p_f`` relate to camera/world coordinates by
    ``p_world = matrix @ p_f``.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if np.abs(np.linalg.norm(m, axis=0) - 1.0).max() > 1e-6:
            raise GeometryError("frame columns must be unit vectors")
        if np.abs(m.T @ m - np.eye(3)).max() > 1e-6:
            raise GeometryError("frame columns must be pairwise orthogonal")
        if abs(np.linalg.det(m) - 1.0) > 1e-6:
            raise GeometryError("frame must be a proper rotation (det = +1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "ManhattanFrame":
        return cls(np.eye(3))

    @classmethod
    def from_yaw(cls, yaw: float) -> "ManhattanFrame":
        return cls(rotation_z(yaw))

    @classmethod
    def from_columns(cls, r1, r2, r3) -> "ManhattanFrame":
        return cls(np.column_stack([r1, r2, r3]))

    @property
    def r1(self) -> np.ndarray:
        return self.matrix[:, 0]

    @property
    def r2(self) -> np.ndarray:
        return self.matrix[:, 1]

    @property
    def r3(self) -> np.ndarray:
        return self.matrix[:, 2]

    def to_frame(self, p) -> np.ndarray:
        """World -> frame coordinates (row vectors)."""
        return np.asarray(p, dtype=np.float64) @ self.matrix

    def to_world(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.matrix.T

    def __eq__(self, other):
        return isinstance(other, ManhattanFrame) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())
