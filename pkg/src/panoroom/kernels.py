"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``circle_support``, ``stamp_disks``, ``cast_room_rays``,
``polar_dp``)
bind to the numba versions unless ``PANOROOM_DISABLE_NUMBA`` is set.  Both
flavours are importable explicitly (``*_numba`` / ``*_numpy``) so tests and
``benchmarks/bench_kernels.py`` can compare them.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# surface codes returned by cast_room_rays; walls are WALL_BASE + edge index
CEILING = 0
FLOOR = 1
WALL_BASE = 2


# -- RANSAC support -----------------------------------------------------------

def circle_support_numpy(normals, points, weights, sin_tol):
    """Weighted count of points within ``asin(sin_tol)`` of each circle."""
    d = np.abs(points @ normals.T)
    return weights @ (d <= sin_tol)


@njit(cache=True)
def circle_support_numba(normals, points, weights, sin_tol):
    k = normals.shape[0]
    n = points.shape[0]
    out = np.zeros(k)
    for i in range(k):
        a = normals[i, 0]
        b = normals[i, 1]
        c = normals[i, 2]
        s = 0.0
        for j in range(n):
            d = a * points[j, 0] + b * points[j, 1] + c * points[j, 2]
            if d <= sin_tol and d >= -sin_tol:
                s += weights[j]
        out[i] = s
    return out


# -- disk stamping (edge rendering) ---------------------------------------------

def stamp_disks_numpy(us, vs, radius, height, width):
    """Anti-aliased thick line through a dense run of samples.

    Each pixel gets ``clip(radius + 0.5 - d, 0, 1)``, where ``d`` is the
    distance from its centre to the nearest sample, so the profile across
    the line is centred on the line itself rather than on whole pixels.
    ``u`` wraps around the seam; rows are clipped.  ``radius == 0`` marks
    the pixel containing each sample with 1.
    """
    mask = np.zeros((height, width), dtype=np.float64)
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    if radius <= 0:
        cols = np.mod(np.floor(us + 0.5).astype(np.int64), width)
        rows = np.clip(np.floor(vs + 0.5).astype(np.int64), 0, height - 1)
        mask[rows, cols] = 1.0
        return mask
    r = int(np.ceil(radius + 0.5))
    base_c = np.floor(us).astype(np.int64)
    base_r = np.floor(vs).astype(np.int64)
    for dr in range(-r, r + 2):
        for dc in range(-r, r + 2):
            rows = base_r + dr
            cols = base_c + dc
            cover = np.clip(radius + 0.5 - np.sqrt((cols - us) ** 2 + (rows - vs) ** 2), 0.0, 1.0)
            ok = (rows >= 0) & (rows < height) & (cover > 0)
            np.maximum.at(mask, (rows[ok], np.mod(cols[ok], width)), cover[ok])
    return mask


@njit(cache=True)
def stamp_disks_numba(us, vs, radius, height, width):
    mask = np.zeros((height, width), dtype=np.float64)
    if radius <= 0:
        for i in range(us.shape[0]):
            c = int(np.floor(us[i] + 0.5)) % width
            r = int(np.floor(vs[i] + 0.5))
            r = min(max(r, 0), height - 1)
            mask[r, c] = 1.0
        return mask
    rr = int(np.ceil(radius + 0.5))
    for i in range(us.shape[0]):
        bc = int(np.floor(us[i]))
        br = int(np.floor(vs[i]))
        for dr in range(-rr, rr + 2):
            row = br + dr
            if row < 0 or row >= height:
                continue
            for dc in range(-rr, rr + 2):
                col = bc + dc
                cover = radius + 0.5 - np.sqrt((col - us[i]) ** 2 + (row - vs[i]) ** 2)
                if cover > 1.0:
                    cover = 1.0
                if cover > 0 and cover > mask[row, col % width]:
                    mask[row, col % width] = cover
    return mask


# -- ray casting (segmentation) -------------------------------------------------

def cast_room_rays_numpy(bearings, poly, floor_z, ceiling_z):
    """Label each ray (frame coordinates) with the first room surface it hits.

    Args:
        bearings: ``(H, W, 3)`` ray directions in frame coordinates.
        poly: ``(n, 2)`` floor polygon; wall ``k`` joins vertex ``k`` and ``k+1``.
        floor_z, ceiling_z: plane heights.

    Returns:
        ``(H, W)`` int array of surface codes.
    """
    h, w, _ = bearings.shape
    dx = bearings[..., 0]
    dy = bearings[..., 1]
    dz = bearings[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(dz > 0, ceiling_z / dz, np.where(dz < 0, floor_z / dz, np.inf))
    best_t = t_plane
    labels = np.where(dz > 0, CEILING, FLOOR).astype(np.int64)
    n = len(poly)
    for k in range(n):
        ax, ay = poly[k]
        bx, by = poly[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        den = dx * (-ey) - dy * (-ex)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ax * (-ey) - ay * (-ex)) / den
            s = (dx * ay - dy * ax) / den
        hit = (np.abs(den) > 1e-15) & (t > 0) & (s >= 0) & (s <= 1) & (t < best_t)
        best_t = np.where(hit, t, best_t)
        labels = np.where(hit, WALL_BASE + k, labels)
    return labels


@njit(cache=True)
def cast_room_rays_numba(bearings, poly, floor_z, ceiling_z):
    h = bearings.shape[0]
    w = bearings.shape[1]
    n = poly.shape[0]
    labels = np.empty((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            dx = bearings[i, j, 0]
            dy = bearings[i, j, 1]
            dz = bearings[i, j, 2]
            if dz > 0:
                best = ceiling_z / dz
                lab = CEILING
            elif dz < 0:
                best = floor_z / dz
                lab = FLOOR
            else:
                best = np.inf
                lab = FLOOR
            for k in range(n):
                ax = poly[k, 0]
                ay = poly[k, 1]
                bx = poly[(k + 1) % n, 0]
                by = poly[(k + 1) % n, 1]
                ex = bx - ax
                ey = by - ay
                den = -dx * ey + dy * ex
                if abs(den) <= 1e-15:
                    continue
                t = (-ax * ey + ay * ex) / den
                s = (dx * ay - dy * ax) / den
                if t > 0 and s >= 0 and s <= 1 and t < best:
                    best = t
                    lab = WALL_BASE + k
            labels[i, j] = lab
    return labels


# -- polar dynamic programme (hypothesis generation) ----------------------------------

_NEG = -1e300


def polar_dp_numpy(evidence, partner, junction, start, max_count):
    """Best cyclic wall sequence around the camera for every corner count.

    Args:
        evidence: ``(N, S)`` score of wall state ``s`` in azimuth column ``c``.
        partner: ``(N, S)`` state that can meet ``s`` at the boundary before
            column ``c`` (a corner), or ``-1``.  Row 0 is the closing boundary.
        junction: ``(N, S)`` bonus for a corner at that boundary.
        start: state of column 0; the sequence must close onto it.
        max_count: largest corner count tracked.

    Returns:
        ``(final, how, back)``: best score per corner count, whether the loop
        closes through a corner (1) or not (0), and ``(N, M, S)`` flags of
        the decisions taken (1 = entered through a corner).
    """
    n, s_count = evidence.shape
    m_count = max_count + 1
    best = np.full((m_count, s_count), _NEG)
    best[0, start] = evidence[0, start]
    back = np.zeros((n, m_count, s_count), dtype=np.int8)
    for c in range(1, n):
        p = partner[c]
        ok = p >= 0
        tr = np.full((m_count, s_count), _NEG)
        tr[1:, ok] = best[:-1, p[ok]] + junction[c, ok]
        tr[tr < 0.5 * _NEG] = _NEG
        take = tr > best
        back[c] = take
        best = np.where(take, tr, best)
        alive = best > 0.5 * _NEG
        best = np.where(alive, best + evidence[c], _NEG)
    final = best[:, start].copy()
    how = np.zeros(m_count, dtype=np.int64)
    p0 = partner[0, start]
    if p0 >= 0:
        prev = best[:-1, p0]
        closing = np.where(prev > 0.5 * _NEG, prev + junction[0, start], _NEG)
        better = closing > final[1:]
        final[1:] = np.where(better, closing, final[1:])
        how[1:] = better
    return final, how, back


@njit(cache=True)
def polar_dp_numba(evidence, partner, junction, start, max_count):
    n, s_count = evidence.shape
    m_count = max_count + 1
    neg = -1e300
    best = np.full((m_count, s_count), neg)
    new = np.empty((m_count, s_count))
    best[0, start] = evidence[0, start]
    back = np.zeros((n, m_count, s_count), dtype=np.int8)
    for c in range(1, n):
        for m in range(m_count):
            for s in range(s_count):
                stay = best[m, s]
                tr = neg
                if m > 0:
                    p = partner[c, s]
                    if p >= 0 and best[m - 1, p] > 0.5 * neg:
                        tr = best[m - 1, p] + junction[c, s]
                if tr > stay:
                    new[m, s] = tr + evidence[c, s]
                    back[c, m, s] = 1
                elif stay > 0.5 * neg:
                    new[m, s] = stay + evidence[c, s]
                else:
                    new[m, s] = neg
        for m in range(m_count):
            for s in range(s_count):
                best[m, s] = new[m, s]
    final = np.full(m_count, neg)
    how = np.zeros(m_count, dtype=np.int64)
    p0 = partner[0, start]
    for m in range(m_count):
        final[m] = best[m, start]
        if m > 0 and p0 >= 0 and best[m - 1, p0] > 0.5 * neg:
            v = best[m - 1, p0] + junction[0, start]
            if v > final[m]:
                final[m] = v
                how[m] = 1
    return final, how, back


if USE_NUMBA:
    circle_support = circle_support_numba
    stamp_disks = stamp_disks_numba
    cast_room_rays = cast_room_rays_numba
    polar_dp = polar_dp_numba
else:
    circle_support = circle_support_numpy
    stamp_disks = stamp_disks_numpy
    cast_room_rays = cast_room_rays_numpy
    polar_dp = polar_dp_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
