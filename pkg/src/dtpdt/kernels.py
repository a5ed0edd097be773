"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``DTPDT_DISABLE_NUMBA`` is unset
(or ``0``). Every public kernel here has both implementations so the two can be
checked against each other and benchmarked (see ``benchmarks/bench_kernels.py``).

All arrays are indexed ``[x, y, z]``.
"""
import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

_USE_NUMBA = HAS_NUMBA and os.environ.get("DTPDT_DISABLE_NUMBA", "0") in ("", "0")


def numba_enabled():
    return _USE_NUMBA


def set_numba(flag):
    """Switch the backend globally; returns the previous setting."""
    global _USE_NUMBA
    prev = _USE_NUMBA
    _USE_NUMBA = bool(flag) and HAS_NUMBA
    return prev


@contextmanager
def backend(use_numba):
    prev = set_numba(use_numba)
    try:
        yield
    finally:
        set_numba(prev)


def _jit(fn):
    if HAS_NUMBA:
        return njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# same-size correlation with zero padding (single channel, constant kernel)
# ---------------------------------------------------------------------------

@_jit
def _correlate3d_nb(x, k):
    nx, ny, nz = x.shape
    kx, ky, kz = k.shape
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    out = np.zeros((nx, ny, nz))
    for a in range(kx):
        ox = a - rx
        for b in range(ky):
            oy = b - ry
            for c in range(kz):
                w = k[a, b, c]
                if w == 0.0:
                    continue
                oz = c - rz
                for i in range(max(0, -ox), min(nx, nx - ox)):
                    for j in range(max(0, -oy), min(ny, ny - oy)):
                        for l in range(max(0, -oz), min(nz, nz - oz)):
                            out[i, j, l] += w * x[i + ox, j + oy, l + oz]
    return out


def _correlate3d_np(x, k):
    kx, ky, kz = k.shape
    rx, ry, rz = kx // 2, ky // 2, kz // 2
    nx, ny, nz = x.shape
    xp = np.pad(x, ((rx, rx), (ry, ry), (rz, rz)))
    out = np.zeros(x.shape)
    for a, b, c in zip(*np.nonzero(k)):
        out += k[a, b, c] * xp[a:a + nx, b:b + ny, c:c + nz]
    return out


def correlate3d(x, k):
    """out[p] = sum_o k[r + o] * x[p + o], zeros outside the volume."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if _USE_NUMBA:
        return _correlate3d_nb(x, k)
    return _correlate3d_np(x, k)


# ---------------------------------------------------------------------------
# windowed max with zero padding, stride 1; taps scanned x-fastest
# ---------------------------------------------------------------------------

def window_taps(w):
    """Window offsets in x-fastest scan order (z outer, x inner)."""
    r = w // 2
    return [(dx, dy, dz)
            for dz in range(-r, r + 1)
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)]


@_jit
def _maxpool_nb(x, w):
    nx, ny, nz = x.shape
    r = w // 2
    out = np.empty((nx, ny, nz))
    arg = np.empty((nx, ny, nz), dtype=np.int32)
    for i in range(nx):
        for j in range(ny):
            for l in range(nz):
                best = -np.inf
                bt = -1
                t = 0
                for dz in range(-r, r + 1):
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            a, b, c = i + dx, j + dy, l + dz
                            if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
                                v = x[a, b, c]
                            else:
                                v = 0.0
                            if v > best:
                                best = v
                                bt = t
                            t += 1
                out[i, j, l] = best
                arg[i, j, l] = bt
    return out, arg


def _maxpool_np(x, w):
    r = w // 2
    nx, ny, nz = x.shape
    xp = np.pad(x, r)
    stack = np.stack([xp[r + dx:r + dx + nx, r + dy:r + dy + ny, r + dz:r + dz + nz]
                      for dx, dy, dz in window_taps(w)])
    arg = np.argmax(stack, axis=0).astype(np.int32)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]
    return out, arg


def maxpool3d(x, w=3):
    """Returns (max, tap index of the first maximum in scan order)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _USE_NUMBA:
        return _maxpool_nb(x, w)
    return _maxpool_np(x, w)


@_jit
def _maxpool_back_nb(g, arg, w):
    nx, ny, nz = g.shape
    r = w // 2
    gx = np.zeros((nx, ny, nz))
    for i in range(nx):
        for j in range(ny):
            for l in range(nz):
                t = arg[i, j, l]
                dx = t % w - r
                dy = (t // w) % w - r
                dz = t // (w * w) - r
                a, b, c = i + dx, j + dy, l + dz
                if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
                    gx[a, b, c] += g[i, j, l]
    return gx


def _maxpool_back_np(g, arg, w):
    r = w // 2
    nx, ny, nz = g.shape
    gp = np.zeros((nx + 2 * r, ny + 2 * r, nz + 2 * r))
    for t, (dx, dy, dz) in enumerate(window_taps(w)):
        sel = arg == t
        if sel.any():
            gp[r + dx:r + dx + nx, r + dy:r + dy + ny, r + dz:r + dz + nz] += np.where(sel, g, 0.0)
    return gp[r:r + nx, r:r + ny, r:r + nz].copy()


def maxpool3d_backward(g, arg, w=3):
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _USE_NUMBA:
        return _maxpool_back_nb(g, arg, w)
    return _maxpool_back_np(g, arg, w)


# ---------------------------------------------------------------------------
# brute-force nearest distance between point sets
# ---------------------------------------------------------------------------

@_jit
def _min_dist_nb(p, q):
    n = p.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(q.shape[0]):
            d0 = p[i, 0] - q[j, 0]
            d1 = p[i, 1] - q[j, 1]
            d2 = p[i, 2] - q[j, 2]
            d = d0 * d0 + d1 * d1 + d2 * d2
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def _min_dist_np(p, q, chunk=2048):
    out = np.empty(len(p))
    for s in range(0, len(p), chunk):
        diff = p[s:s + chunk, None, :] - q[None, :, :]
        out[s:s + chunk] = np.sqrt((diff * diff).sum(-1).min(axis=1))
    return out


def min_distances(p, q):
    """For each row of ``p`` the Euclidean distance to the closest row of ``q``."""
    p = np.ascontiguousarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.ascontiguousarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return np.empty(0)
    if _USE_NUMBA:
        return _min_dist_nb(p, q)
    return _min_dist_np(p, q)


# ---------------------------------------------------------------------------
# 26-connected component labelling; labels numbered by first voxel in
# x-fastest scan order
# ---------------------------------------------------------------------------

@_jit
def _label26_nb(mask):
    nx, ny, nz = mask.shape
    labels = np.zeros((nx, ny, nz), dtype=np.int64)
    queue = np.empty((nx * ny * nz, 3), dtype=np.int64)
    n = 0
    for l in range(nz):
        for j in range(ny):
            for i in range(nx):
                if mask[i, j, l] and labels[i, j, l] == 0:
                    n += 1
                    labels[i, j, l] = n
                    head = 0
                    tail = 1
                    queue[0, 0] = i
                    queue[0, 1] = j
                    queue[0, 2] = l
                    while head < tail:
                        ci = queue[head, 0]
                        cj = queue[head, 1]
                        cl = queue[head, 2]
                        head += 1
                        for dz in range(-1, 2):
                            c = cl + dz
                            if c < 0 or c >= nz:
                                continue
                            for dy in range(-1, 2):
                                b = cj + dy
                                if b < 0 or b >= ny:
                                    continue
                                for dx in range(-1, 2):
                                    a = ci + dx
                                    if a < 0 or a >= nx:
                                        continue
                                    if mask[a, b, c] and labels[a, b, c] == 0:
                                        labels[a, b, c] = n
                                        queue[tail, 0] = a
                                        queue[tail, 1] = b
                                        queue[tail, 2] = c
                                        tail += 1
    return labels, n


def _label26_np(mask):
    from scipy import ndimage

    # scipy scans in C order; transposing makes x the fastest axis
    lab, n = ndimage.label(mask.T, structure=np.ones((3, 3, 3), dtype=bool))
    return np.ascontiguousarray(lab.T).astype(np.int64), int(n)


def label26(mask):
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if _USE_NUMBA:
        lab, n = _label26_nb(mask)
        return lab, int(n)
    return _label26_np(mask)


# ---------------------------------------------------------------------------
# tapered-capsule rasterisation: per voxel, nearest segment distance and the
# owning segment, plus the union of capsules
# ---------------------------------------------------------------------------

@_jit
def _capsules_nb(shape, a, b, ra, rb):
    nx, ny, nz = shape[0], shape[1], shape[2]
    dist = np.full((nx, ny, nz), np.inf)
    owner = np.full((nx, ny, nz), -1, dtype=np.int64)
    inside = np.zeros((nx, ny, nz), dtype=np.bool_)
    for s in range(a.shape[0]):
        rmax = max(ra[s], rb[s])
        lo0 = max(0, int(np.floor(min(a[s, 0], b[s, 0]) - rmax - 1)))
        hi0 = min(nx, int(np.ceil(max(a[s, 0], b[s, 0]) + rmax + 2)))
        lo1 = max(0, int(np.floor(min(a[s, 1], b[s, 1]) - rmax - 1)))
        hi1 = min(ny, int(np.ceil(max(a[s, 1], b[s, 1]) + rmax + 2)))
        lo2 = max(0, int(np.floor(min(a[s, 2], b[s, 2]) - rmax - 1)))
        hi2 = min(nz, int(np.ceil(max(a[s, 2], b[s, 2]) + rmax + 2)))
        e0 = b[s, 0] - a[s, 0]
        e1 = b[s, 1] - a[s, 1]
        e2 = b[s, 2] - a[s, 2]
        ee = e0 * e0 + e1 * e1 + e2 * e2
        for i in range(lo0, hi0):
            for j in range(lo1, hi1):
                for l in range(lo2, hi2):
                    p0 = i - a[s, 0]
                    p1 = j - a[s, 1]
                    p2 = l - a[s, 2]
                    t = 0.0
                    if ee > 0:
                        t = (p0 * e0 + p1 * e1 + p2 * e2) / ee
                        t = min(1.0, max(0.0, t))
                    d0 = p0 - t * e0
                    d1 = p1 - t * e1
                    d2 = p2 - t * e2
                    d = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                    if d <= ra[s] + t * (rb[s] - ra[s]):
                        inside[i, j, l] = True
                    if d < dist[i, j, l]:
                        dist[i, j, l] = d
                        owner[i, j, l] = s
    return dist, owner, inside


def _capsules_np(shape, a, b, ra, rb):
    dist = np.full(shape, np.inf)
    owner = np.full(shape, -1, dtype=np.int64)
    inside = np.zeros(shape, dtype=bool)
    for s in range(len(a)):
        rmax = max(ra[s], rb[s])
        lo = np.maximum(0, np.floor(np.minimum(a[s], b[s]) - rmax - 1).astype(int))
        hi = np.minimum(shape, np.ceil(np.maximum(a[s], b[s]) + rmax + 2).astype(int))
        if np.any(hi <= lo):
            continue
        gx, gy, gz = np.meshgrid(*[np.arange(lo[d], hi[d]) for d in range(3)], indexing="ij")
        p = np.stack([gx, gy, gz], -1) - a[s]
        e = b[s] - a[s]
        ee = e @ e
        t = np.clip(p @ e / ee, 0.0, 1.0) if ee > 0 else np.zeros(gx.shape)
        d = np.linalg.norm(p - t[..., None] * e, axis=-1)
        sl = tuple(slice(lo[k], hi[k]) for k in range(3))
        inside[sl] |= d <= ra[s] + t * (rb[s] - ra[s])
        better = d < dist[sl]
        dist[sl] = np.where(better, d, dist[sl])
        owner[sl] = np.where(better, s, owner[sl])
    return dist, owner, inside


def rasterize_capsules(shape, a, b, ra, rb):
    """Segments ``a[s] -> b[s]`` with radius tapering ``ra[s] -> rb[s]``.

    Returns (distance to nearest segment, index of that segment, union mask).
    The nearest-segment fields are only meaningful near the segments; voxels
    outside every bounding box keep ``inf`` / ``-1``. Equal distances keep
    the earlier segment.
    """
    shape = tuple(int(s) for s in shape)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    ra = np.ascontiguousarray(ra, dtype=np.float64)
    rb = np.ascontiguousarray(rb, dtype=np.float64)
    if _USE_NUMBA:
        return _capsules_nb(np.array(shape, dtype=np.int64), a, b, ra, rb)
    return _capsules_np(shape, a, b, ra, rb)
