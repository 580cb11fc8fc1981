import numpy as np
import pytest
from scipy import ndimage

from dbdh.errors import DegenerateRegionError
from dbdh.geometry import (
    apply_homography, decode_vertices, estimate_homography, quad_iou, quad_iou_detailed, rectify,
    signed_area, warp_image,
)

UNIT = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def _turns_one_way(q):
    e = np.roll(q, -1, axis=0) - q
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross > 0))


def random_convex_quad(rng, center, radius, max_gap=0.8 * np.pi):
    while True:
        angles = np.sort(rng.uniform(0, 2 * np.pi, 4))
        if np.max(np.diff(np.r_[angles, angles[0] + 2 * np.pi])) > max_gap:
            continue
        r = radius * rng.uniform(0.6, 1.0, 4)
        # increasing angle with y down walks the quad in positive-area order;
        # unequal radii can still dent a vertex inwards, so reject those draws
        q = np.stack([center[0] + r * np.cos(angles), center[1] + r * np.sin(angles)], axis=1)
        if _turns_one_way(q):
            return q


def interior_angles(quad):
    out = []
    for i in range(4):
        u, v = quad[i - 1] - quad[i], quad[(i + 1) % 4] - quad[i]
        out.append(np.degrees(np.arccos(np.dot(u, v) / np.linalg.norm(u) / np.linalg.norm(v))))
    return np.array(out)


def well_shaped_quad(rng, center, radius, lo=30.0, hi=150.0):
    # a vertex angle near 0 or 180 degrees puts a corner close to the line the
    # homography sends to infinity, where double rounding alone exceeds 1e-9
    while True:
        q = random_convex_quad(rng, center, radius)
        a = interior_angles(q)
        if a.min() >= lo and a.max() <= hi:
            return q


def test_decode_tie_break_and_constant():
    hm = np.zeros((4, 10, 10))
    assert decode_vertices(hm).tolist() == [[0, 0]] * 4
    hm[0, 5, 5] = hm[0, 5, 6] = 1.0
    assert decode_vertices(hm)[0].tolist() == [5, 5]
    hm[1, 7, 2] = 2.0
    assert decode_vertices(hm)[1].tolist() == [2, 7]


def test_homography_identity_and_scale():
    np.testing.assert_allclose(estimate_homography(UNIT, UNIT).matrix, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(estimate_homography(UNIT, 2 * UNIT).matrix, np.diag([2.0, 2.0, 1.0]), atol=1e-12)


def test_homography_rejects_collinear():
    with pytest.raises(DegenerateRegionError):
        estimate_homography([[0, 0], [1, 1], [2, 2], [0, 5]], UNIT)


def test_homography_residual_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        src = well_shaped_quad(rng, (450, 450), 300)
        dst = well_shaped_quad(rng, (450, 450), 300)
        h = estimate_homography(src, dst)
        assert h.matrix[2, 2] == 1.0
        worst = max(worst, np.abs(h.apply(src) - dst).max())
    assert worst < 1e-9


def test_homography_group_property():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b, c = (random_convex_quad(rng, (128, 128), 100) for _ in range(3))
        ab = estimate_homography(a, b).matrix
        bc = estimate_homography(b, c).matrix
        ac = estimate_homography(a, c).matrix
        composed = bc @ ab
        np.testing.assert_allclose(apply_homography(composed, a), apply_homography(ac, a), atol=1e-7)
        np.testing.assert_allclose(composed / composed[2, 2], ac, atol=1e-7)


def test_iou_closed_forms():
    assert quad_iou(UNIT, UNIT) == 1.0
    assert quad_iou(UNIT, UNIT + [5, 5]) == 0.0
    assert abs(quad_iou(UNIT, UNIT + [0.5, 0]) - 1 / 3) < 1e-12


def test_iou_symmetric_and_orientation_free():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a = random_convex_quad(rng, (128, 128), 80)
        b = random_convex_quad(rng, (140, 120), 80)
        assert abs(quad_iou(a, b) - quad_iou(b, a)) < 1e-12
        assert abs(quad_iou(a, b) - quad_iou(a[::-1], b)) < 1e-12


def test_iou_fallback_for_degenerate_prediction():
    res = quad_iou_detailed(np.zeros((4, 2)), UNIT * 10)
    assert res.method == "raster" and res.iou == 0.0
    bowtie = np.array([[0, 0], [10, 10], [10, 0], [0, 10]], dtype=float)
    res = quad_iou_detailed(bowtie, UNIT * 10)
    assert res.method == "raster" and 0 < res.iou < 1


def test_positive_area_convention():
    assert signed_area(UNIT) == 1.0


def test_rectify_axis_aligned_crop():
    rng = np.random.default_rng(4)
    img = rng.random((60, 80, 3))
    quad = [[10, 5], [49, 5], [49, 34], [10, 34]]
    out = rectify(img, quad, (30, 40))
    np.testing.assert_allclose(out, img[5:35, 10:50], atol=1e-6)


def test_rectify_rotated_square_matches_reference_rotation():
    rng = np.random.default_rng(5)
    base = ndimage.gaussian_filter(rng.random((201, 201)), 3)
    angle = 20.0
    rotated = ndimage.rotate(base, angle, reshape=False, order=1)
    # the centred 101x101 square of ``base`` sits rotated inside ``rotated``
    c = 100.0
    t = np.deg2rad(angle)
    half = 50.0
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    # ndimage.rotate turns content by +angle in (row, col) space: col' = c + cos*dx + sin*dy
    rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
    quad = corners @ rot.T + c
    out = rectify(rotated, quad, (101, 101))
    ref = base[50:151, 50:151]
    assert np.abs(out - ref).mean() <= 0.02


def test_rectify_degenerate():
    with pytest.raises(DegenerateRegionError):
        rectify(np.zeros((10, 10)), np.zeros((4, 2)), (5, 5))


def test_warp_image_translation():
    img = np.zeros((20, 20))
    img[5, 6] = 1.0
    m = np.array([[1, 0, 3], [0, 1, 2], [0, 0, 1]], dtype=float)
    out = warp_image(img, m)
    assert out[7, 9] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)
