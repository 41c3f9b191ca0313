"""Z-buffered triangle rasterization into per-pixel face ids.

Pixel (row, col) is sampled at its centre (col + 0.5, row + 0.5). Coverage
uses edge functions with a top-left fill rule so triangles sharing an edge
never both claim a pixel. Back faces are kept. Geometry in front of the near
plane is clipped before projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .scene_io import Frame, TriMesh, save_pgm16

NEAR = 1e-4
_CHUNK_PAIRS = 1 << 22


@dataclass(eq=False)
class IdBuffer:
    face_id: np.ndarray  # (H, W) int32; face index + 1, 0 = background
    depth: np.ndarray  # (H, W) float64 camera z, +inf = background

    @property
    def shape(self) -> tuple[int, int]:
        return self.face_id.shape

    @property
    def face_index(self) -> np.ndarray:
        """0-based face index per pixel, -1 for background."""
        return self.face_id.astype(np.int64) - 1

    def covered(self) -> np.ndarray:
        return self.face_id != 0


def to_camera(frame: Frame, points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ frame.rotation.T + frame.translation


def project_points(frame: Frame, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel coordinates, camera depth and an in-front flag for (N, 3) world points."""
    pc = to_camera(frame, np.atleast_2d(points))
    z = pc[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    uv = np.stack([frame.fx * pc[:, 0] / zs + frame.cx, frame.fy * pc[:, 1] / zs + frame.cy], axis=1)
    uv[~front] = np.nan
    return uv, z, front


def project_point(frame: Frame, p) -> tuple[tuple[float, float], float, bool]:
    """Returns ((u, v), depth, behind_camera)."""
    uv, z, front = project_points(frame, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return (float(uv[0, 0]), float(uv[0, 1])), float(z[0]), not bool(front[0])


def _clip_near(tris: np.ndarray, ids: np.ndarray, near: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip camera-space triangles against z = near."""
    inside = tris[:, :, 2] > near
    n_in = inside.sum(axis=1)
    keep = n_in == 3
    out_t = [tris[keep]]
    out_i = [ids[keep]]
    for k in np.flatnonzero((n_in > 0) & (n_in < 3)):
        poly = []
        tri = tris[k]
        for a in range(3):
            b = (a + 1) % 3
            pa, pb = tri[a], tri[b]
            ia, ib = inside[k, a], inside[k, b]
            if ia:
                poly.append(pa)
            if ia != ib:
                # canonical endpoint order so shared edges clip identically
                p0, p1 = (pa, pb) if tuple(pa) <= tuple(pb) else (pb, pa)
                t = (near - p0[2]) / (p1[2] - p0[2])
                q = p0 + t * (p1 - p0)
                q[2] = near
                poly.append(q)
        for j in range(1, len(poly) - 1):
            out_t.append(np.array([[poly[0], poly[j], poly[j + 1]]]))
            out_i.append(ids[k : k + 1])
    return np.concatenate(out_t), np.concatenate(out_i)


def _edge(ax, ay, bx, by, px, py):
    """Edge function with endpoints in canonical order.

    Two triangles sharing an edge get exactly negated values, so pixels on the
    edge are decided by the fill rule alone.
    """
    swap = (ax > bx) | ((ax == bx) & (ay > by))
    x0 = np.where(swap, bx, ax)
    y0 = np.where(swap, by, ay)
    x1 = np.where(swap, ax, bx)
    y1 = np.where(swap, ay, by)
    val = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    return np.where(swap, -val, val)


def _top_left(ax, ay, bx, by):
    # positive-area triangles wind clockwise on screen (y points down)
    dx = bx - ax
    dy = by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize(mesh: TriMesh, frame: Frame, near: float = NEAR) -> IdBuffer:
    """Nearest-face id and depth for every pixel of ``frame``."""
    h, w = frame.height, frame.width
    face_id = np.zeros(h * w, dtype=np.int32)
    depth = np.full(h * w, np.inf)

    cam = to_camera(frame, mesh.vertices)[mesh.faces]  # (F, 3, 3)
    tris, ids = _clip_near(cam, np.arange(1, mesh.n_faces + 1, dtype=np.int32), near)
    if len(tris) == 0:
        return IdBuffer(face_id.reshape(h, w), depth.reshape(h, w))

    z = tris[:, :, 2]
    u = frame.fx * tris[:, :, 0] / z + frame.cx
    v = frame.fy * tris[:, :, 1] / z + frame.cy

    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (v[:, 1] - v[:, 0]) * (u[:, 2] - u[:, 0])
    flip = area < 0
    u[flip] = u[flip][:, [0, 2, 1]]
    v[flip] = v[flip][:, [0, 2, 1]]
    z[flip] = z[flip][:, [0, 2, 1]]
    area = np.abs(area)

    c0 = np.clip(np.ceil(u.min(axis=1) - 0.5), 0, w).astype(np.int64)
    c1 = np.clip(np.floor(u.max(axis=1) - 0.5), -1, w - 1).astype(np.int64)
    r0 = np.clip(np.ceil(v.min(axis=1) - 0.5), 0, h).astype(np.int64)
    r1 = np.clip(np.floor(v.max(axis=1) - 0.5), -1, h - 1).astype(np.int64)
    ncol = np.maximum(c1 - c0 + 1, 0)
    nrow = np.maximum(r1 - r0 + 1, 0)
    valid = (area > 0) & (ncol > 0) & (nrow > 0) & np.isfinite(area)
    sel = np.flatnonzero(valid)
    counts = (ncol * nrow)[sel]

    start = 0
    while start < len(sel):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK_PAIRS, side="right")))
        _raster_chunk(sel[start:stop], counts[start:stop], u, v, z, area, ids, c0, r0, ncol, w, face_id, depth)
        start = stop
    return IdBuffer(face_id.reshape(h, w), depth.reshape(h, w))


def _raster_chunk(tri, counts, u, v, z, area, ids, c0, r0, ncol, w, face_id, depth):
    t = np.repeat(tri, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    col = c0[t] + local % ncol[t]
    row = r0[t] + local // ncol[t]
    px = col + 0.5
    py = row + 0.5
    ua, ub, uc = u[t, 0], u[t, 1], u[t, 2]
    va, vb, vc = v[t, 0], v[t, 1], v[t, 2]
    w0 = _edge(ub, vb, uc, vc, px, py)
    w1 = _edge(uc, vc, ua, va, px, py)
    w2 = _edge(ua, va, ub, vb, px, py)
    inside = (
        ((w0 > 0) | ((w0 == 0) & _top_left(ub, vb, uc, vc)))
        & ((w1 > 0) | ((w1 == 0) & _top_left(uc, vc, ua, va)))
        & ((w2 > 0) | ((w2 == 0) & _top_left(ua, va, ub, vb)))
    )
    if not inside.any():
        return
    t, w0, w1, w2 = t[inside], w0[inside], w1[inside], w2[inside]
    pix = (row * w + col)[inside]
    a = area[t]
    # 1/z is affine in screen space for planar triangles
    invz = (w0 / z[t, 0] + w1 / z[t, 1] + w2 / z[t, 2]) / a
    d = 1.0 / invz
    fid = ids[t]

    order = np.lexsort((fid, d, pix))
    pix, d, fid = pix[order], d[order], fid[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, d, fid = pix[first], d[first], fid[first]
    cur_d = depth[pix]
    cur_f = face_id[pix]
    win = (d < cur_d) | ((d == cur_d) & ((cur_f == 0) | (fid < cur_f)))
    depth[pix[win]] = d[win]
    face_id[pix[win]] = fid[win]


def rasterize_all(mesh: TriMesh, frames: Iterable[Frame], threads: int = 1) -> list[IdBuffer]:
    frames = list(frames)
    if threads <= 1:
        return [rasterize(mesh, f) for f in frames]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda f: rasterize(mesh, f), frames))


def region_mask(idbuf: IdBuffer, face_set) -> np.ndarray:
    """Pixels whose visible face is in ``face_set`` (0-based face indices)."""
    faces = np.fromiter(face_set, dtype=np.int64) if not isinstance(face_set, np.ndarray) else face_set.astype(np.int64)
    if faces.size == 0:
        return np.zeros(idbuf.shape, dtype=bool)
    n = max(int(idbuf.face_id.max()), int(faces.max()) + 1) + 1
    lut = np.zeros(n, dtype=bool)
    lut[faces + 1] = True
    lut[0] = False
    return lut[idbuf.face_id]


def save_idbuffer_pgm(path, idbuf: IdBuffer) -> None:
    save_pgm16(path, idbuf.face_id)
