"""Probability maps: container, PRM1 file I/O, ground-truth rendering, losses, metrics."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from . import kernels
from .errors import DegenerateClassError, DimensionError, GeometryError, MapFormatError
from .layout import LayoutModel, distance_to_boundary, point_in_polygon
from .sphere import EquirectGrid, bearing_to_pixel, pixel_index, slerp_arc

DEFAULT_LINE_THICKNESS_PX = 2.0
DEFAULT_BLUR_SIGMA_PX = 1.5
DEFAULT_BIN_THRESHOLD = 0.25
HEADER_FRAME_BYTES = 16


class Channel(enum.Enum):
    EDGE = "E"
    CORNER = "C"


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """``H x W`` per-pixel probabilities over an equirectangular grid.

    Values are stored as float32, the on-disk precision, so a save/load round
    trip is bit exact.
    """

    grid: EquirectGrid
    values: np.ndarray
    channel: Channel = Channel.EDGE

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float32)
        if vals.shape != self.grid.shape:
            raise DimensionError(f"map shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)) or vals.min(initial=0.0) < 0.0 or vals.max(initial=0.0) > 1.0:
            raise MapFormatError("probability values must lie in [0, 1]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "channel", Channel(self.channel))

    @classmethod
    def zeros(cls, grid: EquirectGrid, channel: Channel = Channel.EDGE) -> "ProbabilityMap":
        return cls(grid, np.zeros(grid.shape, np.float32), channel)

    def with_values(self, values) -> "ProbabilityMap":
        return ProbabilityMap(self.grid, values, self.channel)


def as_array(m) -> np.ndarray:
    """Float64 view of a map-like argument (map object or plain array)."""
    if isinstance(m, ProbabilityMap):
        return m.values.astype(np.float64)
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


# -- sampling helpers -------------------------------------------------------------

def sample_bilinear(values, u, v) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (wraps ``u``, clamps ``v``)."""
    a = as_array(values)
    h, w = a.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 1)
    fu = u - u0
    fv = v - v0
    v1 = np.minimum(v0 + 1, h - 1)
    c0 = np.mod(u0, w)
    c1 = np.mod(u0 + 1, w)
    top = a[v0, c0] * (1 - fu) + a[v0, c1] * fu
    bot = a[v1, c0] * (1 - fu) + a[v1, c1] * fu
    return top * (1 - fv) + bot * fv


def arc_pixels(a, b, grid: EquirectGrid, step: float | None = None) -> np.ndarray:
    """Flat indices of the pixels covered by the arc ``a -> b``, de-duplicated.

    The arc is sampled uniformly in angle every ``0.25 * pi / H`` radians by
    default, which is fine enough for 8-connected coverage at any latitude.
    """
    step = 0.25 * grid.row_step if step is None else step
    pts = slerp_arc(a, b, step)
    u, v = bearing_to_pixel(pts, grid)
    col, row = pixel_index(u, v, grid)
    return np.unique(row * grid.width + col)


def suppress_background(m, sigma_px: float = 1.0, k_mad: float = 3.0, clean_level: float = 1e-3):
    """Remove a noisy background from a probability map.

    Maps whose median is at most ``clean_level`` are returned unchanged.
    Otherwise the map is smoothed with a Gaussian of ``sigma_px`` (wrapping
    in azimuth), the level ``median + k_mad * 1.4826 * MAD`` is subtracted
    and the rest is rescaled to ``[0, 1]``.
    """
    a = as_array(m)
    if np.median(a) <= clean_level:
        return m
    sm = gaussian_filter(a, sigma_px, mode=("nearest", "wrap"))
    med = np.median(sm)
    level = med + k_mad * 1.4826 * np.median(np.abs(sm - med))
    out = np.clip((sm - level) / max(sm.max() - level, 1e-12), 0.0, 1.0)
    return m.with_values(out) if isinstance(m, ProbabilityMap) else out


# -- ground-truth rendering -------------------------------------------------------

def _blur_normalise(mask: np.ndarray, sigma: float) -> np.ndarray:
    out = mask.astype(np.float64)
    if sigma > 0:
        out = gaussian_filter(out, sigma, mode=("nearest", "wrap"), truncate=4.0)
    peak = out.max()
    return out / peak if peak > 0 else out


def render_edge_mask(model: LayoutModel, grid: EquirectGrid, line_thickness_px: float) -> np.ndarray:
    """``(H, W)`` coverage in ``[0, 1]`` of every structural edge drawn as an anti-aliased thick arc.

    Zero thickness gives a binary mask of the pixels the arcs pass through.
    """
    step = 0.05 * grid.row_step
    us, vs = [], []
    for a, b in model.edges_world():
        u, v = bearing_to_pixel(slerp_arc(a, b, step), grid)
        us.append(u)
        vs.append(v)
    return kernels.stamp_disks(np.concatenate(us), np.concatenate(vs), 0.5 * float(line_thickness_px),
                               grid.height, grid.width)


def render_gt_maps(model: LayoutModel, grid: EquirectGrid,
                   line_thickness_px: float = DEFAULT_LINE_THICKNESS_PX,
                   blur_sigma_px: float = DEFAULT_BLUR_SIGMA_PX) -> tuple[ProbabilityMap, ProbabilityMap]:
    """Render the edge and corner maps a perfect network would output.

    Every structural edge (wall-wall, wall-floor, wall-ceiling) is projected
    as a great-circle arc, drawn with the given thickness, blurred and
    rescaled to a maximum of 1.  Corners are unit impulses at their nearest
    pixel, blurred the same way.  Edges are drawn without occlusion testing.

    Raises:
        GeometryError: If the camera is not strictly inside the room.
    """
    if line_thickness_px < 0 or blur_sigma_px < 0:
        raise ValueError("thickness and sigma must be non-negative")
    if not point_in_polygon((0.0, 0.0), model.floor_polygon) or not (model.floor_z < 0 < model.ceiling_z):
        raise GeometryError("camera must be strictly inside the room")
    edge = _blur_normalise(render_edge_mask(model, grid, line_thickness_px), blur_sigma_px)

    cmask = np.zeros(grid.shape, dtype=np.uint8)
    u, v = bearing_to_pixel(model.corners_world(), grid)
    col, row = pixel_index(u, v, grid)
    cmask[row, col] = 1
    corner = _blur_normalise(cmask, blur_sigma_px)
    return (ProbabilityMap(grid, np.clip(edge, 0, 1), Channel.EDGE),
            ProbabilityMap(grid, np.clip(corner, 0, 1), Channel.CORNER))


# -- losses ------------------------------------------------------------------------

def class_weights(labels: np.ndarray, unweighted_fallback: bool = False) -> tuple[float, float]:
    """``(lambda_0, lambda_1)`` with ``lambda_c = N / N_c``."""
    n = labels.size
    n1 = int(np.count_nonzero(labels))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        if unweighted_fallback:
            return 1.0, 1.0
        raise DegenerateClassError("both classes must be present to compute N / N_c weights")
    return n / n0, n / n1


def weighted_bce(pred_logits, gt, unweighted_fallback: bool = False) -> float:
    """Class-balanced sigmoid cross-entropy, averaged over pixels.

    ``gt`` is binarised at 0.5.  Logs are clamped at ``1e-12``.
    """
    logits = as_array(pred_logits)
    y = as_array(gt) >= 0.5
    if logits.shape != y.shape:
        raise DimensionError(f"shape mismatch {logits.shape} vs {y.shape}")
    lam0, lam1 = class_weights(y, unweighted_fallback)
    s_pos = np.maximum(expit(logits), 1e-12)
    s_neg = np.maximum(expit(-logits), 1e-12)
    per_pixel = np.where(y, -lam1 * np.log(s_pos), -lam0 * np.log(s_neg))
    return float(per_pixel.mean())


def perceptual_distance(f_pred, f_gt) -> float:
    """Squared L2 distance between two feature tensors."""
    a = np.asarray(f_pred, dtype=np.float64)
    b = np.asarray(f_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


# -- classification metrics -------------------------------------------------------

@dataclass(frozen=True)
class MapMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float


def confusion(pred, gt, bin_threshold: float = DEFAULT_BIN_THRESHOLD) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` after binarising both maps at ``bin_threshold``."""
    p = as_array(pred) >= bin_threshold
    g = as_array(gt) >= bin_threshold
    if p.shape != g.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def map_metrics(pred, gt, bin_threshold: float = DEFAULT_BIN_THRESHOLD) -> MapMetrics:
    """Precision, recall, F1 and accuracy of the positive (structure) class.

    An empty prediction has precision 0; when both maps are empty precision
    and recall are 1.
    """
    if not 0.0 < bin_threshold < 1.0:
        raise ValueError("bin_threshold must lie in (0, 1)")
    tp, fp, fn, tn = confusion(pred, gt, bin_threshold)
    if tp + fp + fn == 0:
        precision = recall = 1.0
    else:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MapMetrics(precision, recall, f1, (tp + tn) / (tp + fp + fn + tn))


# -- PRM1 files ----------------------------------------------------------------------

def map_to_bytes(m: ProbabilityMap) -> bytes:
    header = f"PRM1 {m.grid.width} {m.grid.height} {m.channel.value}"
    header = header.ljust(HEADER_FRAME_BYTES - 1) + "\n"
    return header.encode("ascii") + m.values.astype("<f4").tobytes(order="C")


def map_from_bytes(data: bytes) -> ProbabilityMap:
    nl = data.find(b"\n", 0, 64)
    if nl < 0:
        raise MapFormatError("missing PRM1 header line")
    try:
        magic, w, h, ch = data[:nl].decode("ascii").split()
        w, h = int(w), int(h)
        channel = Channel(ch)
    except (UnicodeDecodeError, ValueError) as exc:
        raise MapFormatError(f"malformed header: {data[:nl]!r}") from exc
    if magic != "PRM1":
        raise MapFormatError(f"bad magic {magic!r}")
    try:
        grid = EquirectGrid(w, h)
    except ValueError as exc:
        raise MapFormatError(str(exc)) from exc
    payload = data[nl + 1:]
    if len(payload) != 4 * w * h:
        raise MapFormatError(f"payload holds {len(payload)} bytes, header declares {4 * w * h}")
    vals = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return ProbabilityMap(grid, vals, channel)


def save_map(m: ProbabilityMap, path) -> None:
    Path(path).write_bytes(map_to_bytes(m))


def load_map(path) -> ProbabilityMap:
    return map_from_bytes(Path(path).read_bytes())


def save_png(m, path) -> None:
    """8-bit grayscale preview, ``round(p * 255)``; for viewing only."""
    from PIL import Image

    a = np.clip(np.rint(as_array(m) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path)
