"""
Tests for reference paths, contouring/lag errors and rectangle overlap
"""

import math

import numpy as np
import pytest

from src.errors import ContractError, DomainError
from src.world.path_world import (
    Dimensions,
    RectFootprint,
    ReferencePath,
    arc_path,
    build_path,
    contour_lag_errors,
    query_path,
    rect_overlap,
    segment_hits_rect,
    segments_hit_rects,
    straight_path,
)


def test_straight_path_query():
    path = straight_path(50.0, start=(1.0, 2.0), heading=0.0, half_width=3.0)
    pose, d_lb, d_rb = query_path(path, 10.0)
    assert pose.x == pytest.approx(11.0)
    assert pose.y == pytest.approx(2.0)
    assert pose.psi == pytest.approx(0.0)
    assert d_lb == pytest.approx(3.0)
    assert d_rb == pytest.approx(3.0)


def test_query_outside_path_raises():
    path = straight_path(10.0)
    with pytest.raises(DomainError):
        query_path(path, 10.5)
    with pytest.raises(DomainError):
        contour_lag_errors(path, 0.0, 0.0, -0.1)


def test_contour_and_lag_sign_convention():
    path = straight_path(20.0)
    # right of the path and behind the reference point
    e_c, e_l = contour_lag_errors(path, 4.0, -1.5, 5.0)
    assert e_c == pytest.approx(1.5)
    assert e_l == pytest.approx(1.0)
    e_c, e_l = contour_lag_errors(path, 6.0, 0.5, 5.0)
    assert e_c == pytest.approx(-0.5)
    assert e_l == pytest.approx(-1.0)


def test_arc_path_geometry():
    radius = 10.0
    path = arc_path(radius, math.pi / 2.0)
    assert path.theta_max == pytest.approx(radius * math.pi / 2.0)
    pose, _, _ = query_path(path, path.theta_max)
    assert pose.x == pytest.approx(radius, abs=1e-6)
    assert pose.y == pytest.approx(radius, abs=1e-6)
    assert pose.psi == pytest.approx(math.pi / 2.0, abs=1e-6)


def test_contouring_errors_invariant_under_rigid_motion():
    rng = np.random.default_rng(3)
    base = build_path((0.0, 0.0), 0.0, [("straight", 10.0), ("arc", 8.0, 1.0), ("straight", 10.0)], 2.0, 2.0)
    for _ in range(1000):
        rot = rng.uniform(-math.pi, math.pi)
        shift = rng.uniform(-50.0, 50.0, size=2)
        moved = build_path(tuple(shift), rot, [("straight", 10.0), ("arc", 8.0, 1.0), ("straight", 10.0)], 2.0, 2.0)
        theta = rng.uniform(0.0, base.theta_max)
        p = rng.uniform(-5.0, 25.0, size=2)
        c, s = math.cos(rot), math.sin(rot)
        q = shift + np.array([c * p[0] - s * p[1], s * p[0] + c * p[1]])
        e0 = contour_lag_errors(base, p[0], p[1], theta)
        e1 = contour_lag_errors(moved, q[0], q[1], theta)
        assert e1 == pytest.approx(e0, abs=1e-6)


def test_project_finds_closest_arclength():
    path = straight_path(30.0, heading=0.0)
    assert path.project(12.3, 1.0) == pytest.approx(12.3)
    thetas = path.project(np.array([0.0, 5.0, 40.0]), np.zeros(3))
    np.testing.assert_allclose(thetas, [0.0, 5.0, 30.0])


def test_path_validation():
    with pytest.raises(ContractError):
        ReferencePath([0.0], [0.0], [0.0], [0.0], [1.0], [1.0])
    with pytest.raises(ContractError):
        ReferencePath([0.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(ContractError):
        ReferencePath([0.0, 0.4], [0.0, 0.4], [0.0, 0.0], [0.0, 0.0], [1.0, -1.0], [1.0, 1.0])


def test_path_file_round_trip(tmp_path):
    path = build_path((0.0, 0.0), 0.3, [("straight", 5.0), ("arc", 6.0, -0.8)], 2.0, 1.5, lane_markers=(1.0,))
    file_path = tmp_path / "path.txt"
    path.to_file(str(file_path))
    loaded = ReferencePath.from_file(str(file_path), lane_markers=(1.0,))
    assert len(loaded) == len(path)
    assert loaded.lane_markers == (1.0,)
    a, _, _ = query_path(path, 7.0)
    b, _, _ = query_path(loaded, 7.0)
    assert (b.x, b.y, b.psi) == pytest.approx((a.x, a.y, a.psi), abs=1e-6)


def test_from_file_rejects_malformed_rows(tmp_path):
    file_path = tmp_path / "bad.txt"
    file_path.write_text("0 0 0 0 1\n")
    with pytest.raises(ContractError):
        ReferencePath.from_file(str(file_path))


def test_rect_overlap():
    dims = Dimensions(4.0, 2.0)
    a = RectFootprint.at(0.0, 0.0, 0.0, dims)
    assert rect_overlap(a, RectFootprint.at(3.9, 0.0, 0.0, dims))
    assert not rect_overlap(a, RectFootprint.at(4.1, 0.0, 0.0, dims))
    # rotated by 45 degrees the nearest corner lies 3 / sqrt(2) from the center along x
    assert rect_overlap(a, RectFootprint.at(2.0 + 2.1, 0.0, math.pi / 4.0, dims))
    assert not rect_overlap(a, RectFootprint.at(2.0 + 2.15, 0.0, math.pi / 4.0, dims))


def test_segment_hits_rect():
    r = RectFootprint.at(5.0, 0.0, 0.0, Dimensions(2.0, 2.0))
    assert segment_hits_rect(np.array([0.0, 0.0]), np.array([10.0, 0.0]), r)
    assert not segment_hits_rect(np.array([0.0, 2.0]), np.array([10.0, 2.0]), r)
    assert not segment_hits_rect(np.array([0.0, 0.0]), np.array([3.0, 0.0]), r)


def random_rects(rng, n):
    return (
        rng.uniform(-6.0, 6.0, (n, 2)),
        rng.uniform(-math.pi, math.pi, n),
        rng.uniform(0.5, 5.0, n),
        rng.uniform(0.5, 3.0, n),
    )


def polygon(center, heading, length, width):
    """Corners in cyclic order, built from the heading directly"""
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    along = np.concatenate([c, s], axis=-1) * (length / 2.0)[..., None]
    across = np.concatenate([-s, c], axis=-1) * (width / 2.0)[..., None]
    return np.stack(
        [center + along + across, center - along + across, center - along - across, center + along - across], axis=-2
    )


def cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def segments_cross(p1, p2, q1, q2):
    d1, d2 = cross(q1, q2, p1), cross(q1, q2, p2)
    d3, d4 = cross(p1, p2, q1), cross(p1, p2, q2)
    return (d1 * d2 <= 0.0) & (d3 * d4 <= 0.0)


def inside(point, poly):
    """Point in convex polygon: same side of every edge"""
    signs = np.stack([cross(poly[..., i, :], poly[..., (i + 1) % 4, :], point) for i in range(4)], axis=-1)
    return np.all(signs >= 0.0, axis=-1) | np.all(signs <= 0.0, axis=-1)


def polygons_meet(pa, pb):
    hit = np.zeros(pa.shape[:-2], dtype=bool)
    for i in range(4):
        for j in range(4):
            hit |= segments_cross(pa[..., i, :], pa[..., (i + 1) % 4, :], pb[..., j, :], pb[..., (j + 1) % 4, :])
    return hit | inside(pa[..., 0, :], pb) | inside(pb[..., 0, :], pa)


def test_rect_overlap_matches_polygon_intersection():
    rng = np.random.default_rng(11)
    n = 100_000
    ca, ha, la, wa = random_rects(rng, n)
    cb, hb, lb, wb = random_rects(rng, n)
    expected = polygons_meet(polygon(ca, ha, la, wa), polygon(cb, hb, lb, wb))
    assert 0.05 < expected.mean() < 0.95
    for k in range(n):
        a = RectFootprint(ca[k, 0], ca[k, 1], ha[k], la[k], wa[k])
        b = RectFootprint(cb[k, 0], cb[k, 1], hb[k], lb[k], wb[k])
        forward = rect_overlap(a, b)
        assert forward == expected[k], k
        assert rect_overlap(b, a) == forward, k


def test_rect_overlap_at_touching_distance():
    square = Dimensions(2.0, 2.0)
    a = RectFootprint.at(0.0, 0.0, 0.0, square)
    # the diamond's corner reaches sqrt(2) from its center
    touch = 1.0 + math.sqrt(2.0)
    assert rect_overlap(a, RectFootprint.at(touch - 1e-9, 0.0, math.pi / 4.0, square))
    assert not rect_overlap(a, RectFootprint.at(touch + 1e-9, 0.0, math.pi / 4.0, square))
    assert rect_overlap(a, RectFootprint.at(2.0 - 1e-9, 2.0 - 1e-9, 0.0, square))
    assert rect_overlap(a, RectFootprint.at(2.0, 2.0, 0.0, square))
    assert not rect_overlap(a, RectFootprint.at(2.0 + 1e-9, 2.0 + 1e-9, 0.0, square))
    assert not rect_overlap(a, RectFootprint.at(2.0 - 1e-9, 2.0 + 1e-9, 0.0, square))


def test_segments_hit_rects_matches_edge_intersection():
    rng = np.random.default_rng(12)
    n = 100_000
    center, heading, length, width = random_rects(rng, n)
    p1 = rng.uniform(-10.0, 10.0, (n, 2))
    p2 = p1 + rng.uniform(-6.0, 6.0, (n, 2))
    poly = polygon(center, heading, length, width)
    expected = inside(p1, poly) | inside(p2, poly)
    for i in range(4):
        expected |= segments_cross(p1, p2, poly[:, i, :], poly[:, (i + 1) % 4, :])
    assert 0.05 < expected.mean() < 0.95
    hit = segments_hit_rects(p1, p2, center[:, 0], center[:, 1], heading, length, width)
    np.testing.assert_array_equal(hit, expected)


def test_segments_grazing_the_rectangle():
    r = RectFootprint.at(0.0, 0.0, 0.0, Dimensions(2.0, 2.0))
    assert segment_hits_rect(np.array([-2.0, 1.0]), np.array([2.0, 1.0]), r)
    assert not segment_hits_rect(np.array([-2.0, 1.0 + 1e-9]), np.array([2.0, 1.0 + 1e-9]), r)
    # diagonal through the corner (1, 1)
    assert segment_hits_rect(np.array([0.0, 2.0]), np.array([2.0, 0.0]), r)
    assert not segment_hits_rect(np.array([0.0, 2.0 + 2e-9]), np.array([2.0 + 2e-9, 0.0]), r)
    # ends exactly on an edge
    assert segment_hits_rect(np.array([3.0, 0.0]), np.array([1.0, 0.0]), r)
    assert not segment_hits_rect(np.array([3.0, 0.0]), np.array([1.0 + 1e-9, 0.0]), r)


def test_dimensions_must_be_positive():
    with pytest.raises(ContractError):
        Dimensions(0.0, 2.0)
