import numpy as np
import pytest
from hypothesis import given, strategies as st

from survey_disagg.geometry import (
    ArealHierarchy,
    ArealUnit,
    population_weights,
    quadrature_points,
    rectangle_unit,
    ring_self_intersects,
    validate_hierarchy,
)
from survey_disagg.kernels import points_in_rings

L_SHAPE = [[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2], [0, 0]]


def two_tract_hierarchy():
    h = ArealHierarchy()
    h.tracts["a"] = rectangle_unit("a", 0, 0, 1, 1)
    h.tracts["b"] = rectangle_unit("b", 1, 0, 2, 1)
    for t in ("a", "b"):
        h.tract_to_puma[t] = "P"
        h.tract_to_county[t] = "C"
    h.populations.update({("a", 1): 100.0, ("b", 1): 300.0, ("P", 1): 400.0})
    return h


def test_area_and_bbox():
    u = ArealUnit("L", "tract", [L_SHAPE], (0.7, 0.7))
    assert u.area == pytest.approx(3.0)
    assert u.bbox == (0.0, 0.0, 2.0, 2.0)


def test_hole_reduces_area_and_excludes_points():
    hole = [[0.25, 0.25], [0.75, 0.25], [0.75, 0.75], [0.25, 0.75], [0.25, 0.25]]
    u = ArealUnit("h", "tract", [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], hole], (0.1, 0.1))
    assert u.area == pytest.approx(0.75)
    assert not u.contains([[0.5, 0.5]])[0]
    assert u.contains([[0.1, 0.5]])[0]


def test_contains_l_shape():
    u = ArealUnit("L", "tract", [L_SHAPE], (0.5, 0.5))
    assert list(u.contains([[0.5, 0.5], [1.5, 1.5], [1.5, 0.5], [0.5, 1.5]])) == [True, False, True, True]


@given(st.lists(st.tuples(st.floats(-1, 3), st.floats(-1, 3)), min_size=1, max_size=40))
def test_backends_agree(pts):
    pts = np.array(pts)
    ring = np.array(L_SHAPE, dtype=float)
    a = points_in_rings(pts, [ring], backend="python")
    try:
        b = points_in_rings(pts, [ring], backend="cython")
    except RuntimeError:
        pytest.skip("compiled kernels not built")
    np.testing.assert_array_equal(a, b)


def test_self_intersection():
    bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]], dtype=float)
    assert ring_self_intersects(bowtie)
    assert not ring_self_intersects(np.array(L_SHAPE, dtype=float))
    u = ArealUnit("x", "tract", [bowtie], (0.5, 0.5))
    assert any("self-intersects" in p for p in u.validate())


def test_unclosed_ring_flagged():
    u = ArealUnit("x", "tract", [[[0, 0], [1, 0], [1, 1], [0, 1]]], (0.5, 0.5))
    assert any("not closed" in p for p in u.validate())


def test_unknown_level():
    with pytest.raises(ValueError):
        ArealUnit("x", "state", [L_SHAPE], (0, 0))


def test_valid_hierarchy():
    assert validate_hierarchy(two_tract_hierarchy()) == []


def test_hierarchy_population_mismatch():
    h = two_tract_hierarchy()
    h.populations[("P", 1)] = 500.0
    assert any("differs" in p for p in validate_hierarchy(h))


def test_hierarchy_missing_county():
    h = two_tract_hierarchy()
    del h.tract_to_county["b"]
    assert any("no county" in p for p in validate_hierarchy(h))


def test_population_weights():
    w = population_weights(two_tract_hierarchy(), "P", 1)
    assert w == pytest.approx({"a": 0.25, "b": 0.75})


def test_population_weights_zero_total():
    h = two_tract_hierarchy()
    h.populations[("a", 1)] = h.populations[("b", 1)] = 0.0
    with pytest.raises(ValueError):
        population_weights(h, "P", 1)


def test_quadrature_inside_and_reproducible():
    u = ArealUnit("L", "tract", [L_SHAPE], (0.5, 0.5))
    q1 = quadrature_points(u, 200, 3)
    q2 = quadrature_points(u, 200, 3)
    np.testing.assert_array_equal(q1.points, q2.points)
    assert np.all(u.contains(q1.points))
    assert q1.weights.sum() == pytest.approx(1.0)
    assert not np.array_equal(q1.points, quadrature_points(u, 200, 4).points)


def test_quadrature_integrates_linear_function():
    u = ArealUnit("L", "tract", [L_SHAPE], (0.5, 0.5))
    q = quadrature_points(u, 20000, 0)
    # mean of x over the L shape: (0.5*2 + 1.5*1) / 3
    assert np.mean(q.points[:, 0]) == pytest.approx(2.5 / 3, abs=0.01)


def test_quadrature_degenerate_polygon():
    u = ArealUnit("z", "tract", [[[0, 0], [1, 1], [2, 2], [0, 0]]], (1, 1))
    with pytest.raises(RuntimeError):
        quadrature_points(u, 5, 0)
