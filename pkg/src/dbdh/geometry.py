"""Vertex decoding, 4-point homographies, rectification and quadrilateral IoU.

Coordinates are (x, y) with y pointing down. Quadrilaterals are ordered
TL, TR, BR, BL, which gives a positive shoelace area in this frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateRegionError

CORNER_ORDER = "TL,TR,BR,BL"


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def apply(self, points) -> np.ndarray:
        return apply_homography(self.matrix, points)

    def inverse(self) -> "Homography":
        inv = np.linalg.inv(self.matrix)
        return Homography(inv / inv[2, 2])


@dataclass(frozen=True)
class IoUResult:
    iou: float
    method: str  # "exact" or "raster"


def nearest_pixel(points) -> np.ndarray:
    """Round half up to integer pixel coordinates."""
    return np.floor(np.asarray(points, dtype=np.float64) + 0.5).astype(np.int64)


def apply_homography(matrix, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(matrix, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]


def decode_vertices(heatmaps) -> np.ndarray:
    """Per-channel argmax -> (4, 2) array of (x, y). Ties go to the first row-major index."""
    hm = np.asarray(heatmaps)
    c, h, w = hm.shape
    flat = hm.reshape(c, -1).argmax(axis=1)
    ys, xs = np.divmod(flat, w)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i in range(4):
        a, b, c = (pts[j] for j in range(4) if j != i)
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) <= tol * scale * scale:
            return True
    return False


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0, -s * centroid[0]],
                     [0, s, -s * centroid[1]],
                     [0, 0, 1.0]])


def estimate_homography(src, dst) -> Homography:
    """Exact 4-point DLT (Hartley-normalized), scaled so H[2, 2] = 1."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    if _has_collinear_triple(src) or _has_collinear_triple(dst):
        raise DegenerateRegionError("three of the four points are collinear")
    m = _dlt(src, dst)
    # one refinement pass on the residual map trims the last bits of error
    mapped = apply_homography(m, src)
    if not _has_collinear_triple(mapped):
        m = _dlt(mapped, dst) @ m
    return Homography(m / m[2, 2])


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    ts, td = _normalizing_transform(src), _normalizing_transform(dst)
    s = apply_homography(ts, src)
    d = apply_homography(td, dst)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    h = np.append(np.linalg.solve(a, b), 1.0).reshape(3, 3)
    m = np.linalg.inv(td) @ h @ ts
    return m / m[2, 2]


def warp_image(image, matrix, out_hw=None, cval: float = 0.0) -> np.ndarray:
    """Forward-map ``image`` by ``matrix`` using bilinear inverse sampling.

    Works on H x W or H x W x C arrays; pixels mapping outside the source
    are filled with ``cval``.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2] if out_hw is None else out_hw
    inv = np.linalg.inv(np.asarray(matrix, dtype=np.float64))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = inv @ pts
    sx = (src[0] / src[2]).reshape(h, w)
    sy = (src[1] / src[2]).reshape(h, w)
    coords = np.stack([sy, sx])
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=cval)
    return np.stack([
        ndimage.map_coordinates(img[..., c], coords, order=1, mode="constant", cval=cval)
        for c in range(img.shape[2])
    ], axis=-1)


def rectify(image, quad, out_size) -> np.ndarray:
    """Resample the region inside ``quad`` onto an upright out_size = (h, w) grid."""
    h, w = out_size
    if h <= 0 or w <= 0:
        raise ValueError(f"out_size must be positive, got {out_size}")
    quad = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    if not is_simple(quad) or abs(signed_area(quad)) < 1e-9:
        raise DegenerateRegionError("cannot rectify a degenerate quadrilateral")
    rect = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    hmat = estimate_homography(quad, rect).matrix
    return warp_image(image, hmat, out_hw=(h, w))


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


def is_simple(quad) -> bool:
    """True when neither pair of opposite edges crosses."""
    q = np.asarray(quad, dtype=np.float64).reshape(4, 2)
    return not (_segments_cross(q[0], q[1], q[2], q[3]) or _segments_cross(q[1], q[2], q[3], q[0]))


def is_convex(poly) -> bool:
    p = np.asarray(poly, dtype=np.float64)
    n = len(p)
    signs = []
    for i in range(n):
        a, b, c = p[i], p[(i + 1) % n], p[(i + 2) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross != 0:
            signs.append(cross > 0)
    return len(signs) > 0 and (all(signs) or not any(signs)) and abs(signed_area(p)) > 0


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex positive-area ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _oriented(poly: np.ndarray) -> np.ndarray:
    return poly if signed_area(poly) >= 0 else poly[::-1].copy()


def raster_iou(a, b, supersample: int = 2) -> float:
    """IoU of two polygons by even-odd point sampling on a 1/supersample pixel grid."""
    from matplotlib.path import Path

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pts = np.concatenate([a, b])
    lo = np.floor(pts.min(axis=0)) - 1
    hi = np.ceil(pts.max(axis=0)) + 1
    step = 1.0 / supersample
    xs = np.arange(lo[0] + step / 2, hi[0], step)
    ys = np.arange(lo[1] + step / 2, hi[1], step)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    in_a = Path(a).contains_points(grid)
    in_b = Path(b).contains_points(grid)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def quad_iou_detailed(a, b) -> IoUResult:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if not (is_convex(a) and is_convex(b)):
        return IoUResult(raster_iou(a, b, supersample=2), "raster")
    a, b = _oriented(a), _oriented(b)
    inter_poly = clip_convex(a, b)
    inter = signed_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = signed_area(a) + signed_area(b) - inter
    return IoUResult(float(min(max(inter / union, 0.0), 1.0)), "exact")


def quad_iou(a, b) -> float:
    """Intersection over union of two quadrilaterals, in [0, 1]."""
    return quad_iou_detailed(a, b).iou
