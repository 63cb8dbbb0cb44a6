"""Layout quality metrics: 3D IoU, corner error, pixel error and segmentation rendering."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from shapely.geometry import Polygon

from . import kernels
from .errors import MetricError
from .layout import LayoutModel
from .sphere import EquirectGrid, grid_bearings

EVAL_GRID = EquirectGrid(256, 128)


class Scheme(enum.Enum):
    SS = "SS"
    CS = "CS"


@dataclass(frozen=True, eq=False)
class SegmentationMap:
    """Per-pixel surface labels: ceiling 0, floor 1, walls from 2.

    ``SS`` maps use the single wall label 2; ``CS`` maps number the walls
    ``2 .. n + 1`` in order of first appearance scanning columns from ``u = 0``.
    """

    grid: EquirectGrid
    labels: np.ndarray
    scheme: Scheme = Scheme.SS

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64)
        if lab.shape != self.grid.shape:
            raise MetricError(f"label shape {lab.shape} does not match grid {self.grid.shape}")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "scheme", Scheme(self.scheme))


@dataclass(frozen=True)
class EvalReport:
    iou3d: float
    corner_error_pct: float
    pe_ss_pct: float
    pe_cs_pct: float

    @classmethod
    def failure(cls) -> "EvalReport":
        """Scores of a room that could not be reconstructed: nothing right."""
        return cls(0.0, 100.0, 100.0, 100.0)


# -- 3D IoU ------------------------------------------------------------------------------

def _frame_yaw(model: LayoutModel) -> float:
    m = model.frame.matrix
    return float(np.arctan2(m[1, 0], m[0, 0]))


def world_polygon(model: LayoutModel) -> np.ndarray:
    """Floor polygon rotated by the frame's yaw into world ``(x, y)``."""
    a = _frame_yaw(model)
    c, s = np.cos(a), np.sin(a)
    p = model.floor_polygon
    return np.column_stack([c * p[:, 0] - s * p[:, 1], s * p[:, 0] + c * p[:, 1]])


def _prism(model: LayoutModel) -> tuple[Polygon, float, float]:
    poly = Polygon(world_polygon(model))
    if not poly.is_valid or poly.area <= 0 or model.ceiling_z <= model.floor_z:
        raise MetricError("degenerate room: zero floor area or height")
    return poly, model.floor_z, model.ceiling_z


def iou_3d(pred: LayoutModel, gt: LayoutModel) -> float:
    """Volume intersection over union of the two room prisms in world coordinates.

    Raises:
        MetricError: If either room has zero floor area or height.
    """
    a, a0, a1 = _prism(pred)
    b, b0, b1 = _prism(gt)
    dz = max(0.0, min(a1, b1) - max(a0, b0))
    inter = a.intersection(b).area * dz
    va = a.area * (a1 - a0)
    vb = b.area * (b1 - b0)
    union = va + vb - inter
    if abs(union - inter) <= 1e-12 * union:
        return 1.0  # identical prisms; clipping round-off would leave 1 - eps
    return float(min(max(inter / union, 0.0), 1.0))


# -- corner error ---------------------------------------------------------------------------

def pixel_distances(a, b, grid: EquirectGrid, wrap: bool = True) -> np.ndarray:
    """``(len(a), len(b))`` L2 pixel distances, horizontally wrap-aware by default."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    du = np.abs(a[:, None, 0] - b[None, :, 0])
    if wrap:
        du = np.minimum(du, grid.width - du)
    dv = a[:, None, 1] - b[None, :, 1]
    return np.sqrt(du * du + dv * dv)


def corner_error_pixels(pred_px, gt_px, grid: EquirectGrid, wrap: bool = True) -> float:
    """Corner error (percent of the image diagonal) between two pixel sets.

    Corners are paired by a minimum-cost assignment; every corner left
    without a partner costs one diagonal.  The mean is over the larger set.
    """
    diag = float(np.hypot(grid.width, grid.height))
    d = pixel_distances(pred_px, gt_px, grid, wrap)
    n = max(d.shape)
    if n == 0:
        return 0.0
    cost = np.full((n, n), diag)
    cost[:d.shape[0], :d.shape[1]] = np.minimum(d, diag)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n / diag * 100.0)


def corner_error(pred: LayoutModel, gt: LayoutModel, grid: EquirectGrid = EVAL_GRID) -> float:
    """Corner error in percent of the image diagonal (see :func:`corner_error_pixels`)."""
    return corner_error_pixels(pred.corner_pixels(grid), gt.corner_pixels(grid), grid)


# -- segmentation ------------------------------------------------------------------------------

def render_segmentation(model: LayoutModel, grid: EquirectGrid = EVAL_GRID,
                        scheme: Scheme = Scheme.SS) -> SegmentationMap:
    """Label every pixel with the room surface its ray hits first."""
    scheme = Scheme(scheme)
    rays = model.frame.to_frame(grid_bearings(grid).reshape(-1, 3)).reshape(grid.height, grid.width, 3)
    codes = kernels.cast_room_rays(np.ascontiguousarray(rays), np.ascontiguousarray(model.floor_polygon),
                                   model.floor_z, model.ceiling_z)
    if scheme is Scheme.SS:
        return SegmentationMap(grid, np.minimum(codes, kernels.WALL_BASE), scheme)
    return SegmentationMap(grid, _order_walls(codes), scheme)


def _order_walls(codes: np.ndarray) -> np.ndarray:
    """Renumber wall codes by first appearance scanning columns from ``u = 0``, top to bottom."""
    walls = np.unique(codes[codes >= kernels.WALL_BASE])
    first = []
    flat_t = codes.T.reshape(-1)  # column-major scan
    for k in walls:
        first.append(int(np.argmax(flat_t == k)))
    out = codes.copy()
    for rank, idx in enumerate(np.argsort(first, kind="stable")):
        out[codes == walls[idx]] = kernels.WALL_BASE + rank
    return out


def _match_walls(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pred labels with walls renamed to their one-to-one best-overlapping gt wall.

    Unmatched pred walls get a label no gt pixel carries.
    """
    pw = np.unique(pred[pred >= kernels.WALL_BASE])
    gw = np.unique(gt[gt >= kernels.WALL_BASE])
    out = pred.copy()
    if len(pw) == 0:
        return out
    overlap = np.zeros((len(pw), len(gw)))
    for i, a in enumerate(pw):
        m = pred == a
        for j, b in enumerate(gw):
            overlap[i, j] = np.count_nonzero(m & (gt == b))
    rows, cols = linear_sum_assignment(-overlap) if len(gw) else (np.zeros(0, int), np.zeros(0, int))
    target = {}
    fresh = int(max(pw.max(), gw.max() if len(gw) else 0)) + 1
    for i, j in zip(rows, cols):
        if overlap[i, j] > 0:
            target[i] = gw[j]
    for i, a in enumerate(pw):
        if i not in target:
            target[i] = fresh
            fresh += 1
    for i, a in enumerate(pw):
        out[pred == a] = target[i]
    return out


def pixel_error(pred: SegmentationMap, gt: SegmentationMap) -> float:
    """Percentage of pixels whose labels differ (``CS`` walls matched by overlap first).

    Raises:
        MetricError: If the grids or schemes differ.
    """
    if pred.scheme is not gt.scheme:
        raise MetricError(f"scheme mismatch: {pred.scheme.value} vs {gt.scheme.value}")
    if pred.grid != gt.grid:
        raise MetricError("segmentations live on different grids")
    p = pred.labels
    if pred.scheme is Scheme.CS:
        p = _match_walls(p, gt.labels)
    return float(np.count_nonzero(p != gt.labels) * 100.0 / p.size)


# -- reports ------------------------------------------------------------------------------------

def evaluate(pred: LayoutModel | None, gt: LayoutModel, grid: EquirectGrid = EVAL_GRID) -> EvalReport:
    """All four metrics for one room; ``pred = None`` (a failed reconstruction) scores worst."""
    if pred is None:
        return EvalReport.failure()
    pe = []
    for scheme in (Scheme.SS, Scheme.CS):
        pe.append(pixel_error(render_segmentation(pred, grid, scheme), render_segmentation(gt, grid, scheme)))
    return EvalReport(iou_3d(pred, gt), corner_error(pred, gt, grid), pe[0], pe[1])


CSV_HEADER = ("id", "iou3d", "ce_pct", "pe_ss_pct", "pe_cs_pct")


def mean_report(reports) -> EvalReport:
    """Field-wise mean, accumulated in input order."""
    reports = list(reports)
    if not reports:
        raise MetricError("no reports to average")
    sums = [0.0] * len(fields(EvalReport))
    for r in reports:
        for k, v in enumerate(astuple(r)):
            sums[k] += v
    return EvalReport(*(s / len(reports) for s in sums))


def reports_csv(rows) -> str:
    """CSV text: one row per ``(id, report)`` and a final ``mean`` row."""
    rows = list(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for ident, r in rows:
        w.writerow([ident] + [repr(float(v)) for v in astuple(r)])
    if rows:
        w.writerow(["mean"] + [repr(float(v)) for v in astuple(mean_report(r for _, r in rows))])
    return buf.getvalue()
