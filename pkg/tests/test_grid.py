import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fphjb.grid import Field, GridError, TimeGrid, build_mesh, integrate, interpolate, moment, moments


def test_three_nodes():
    m = build_mesh([(0, 1)], [3])
    assert np.array_equal(m.nodes[:, 0], [0.0, 0.5, 1.0])


def test_pv_mesh_size():
    m = build_mesh([(-5, 5), (-40, 220), (-30, 40)], [21, 66, 71])
    assert m.size == 98_406
    assert np.allclose(m.spacing, [0.5, 4.0, 1.0])


@pytest.mark.parametrize("bounds, counts", [([(1, 0)], [5]), ([(0, 1)], [2]), ([(0, 1), (0, 1)], [3])])
def test_invalid_meshes(bounds, counts):
    with pytest.raises(GridError):
        build_mesh(bounds, counts)


def test_timegrid():
    tg = TimeGrid(0.0, 24.0, 0.5)
    assert tg.steps == 48 and tg.times[-1] == 24.0
    with pytest.raises(GridError):
        TimeGrid(0.0, 1.0, 0.3)


@pytest.mark.parametrize("n", [3, 11, 50])
def test_integrate_constant(n):
    m = build_mesh([(0, 1)], [n])
    assert integrate(np.ones(m.size), m) == pytest.approx(1.0, rel=1e-14)


def test_integrate_linear_exact():
    m = build_mesh([(0, 1)], [101])
    assert integrate(m.nodes[:, 0], m) == pytest.approx(0.5, rel=1e-14)


def test_integrate_normal():
    m = build_mesh([(-5, 5)], [201])
    y = m.nodes[:, 0]
    pdf = np.exp(-0.5 * y**2) / math.sqrt(2 * math.pi)
    # erf(5/sqrt 2) = 1 - 5.7e-7; the trapezoid error is far smaller for a Gaussian
    assert integrate(pdf, m) == pytest.approx(1.0, abs=1e-6)


def test_moments():
    m = build_mesh([(-30, 40)], [71])
    y = m.nodes[:, 0]
    pdf = np.exp(-0.5 * ((y - 2.0) / 0.1) ** 2)
    pdf /= integrate(pdf, m)
    assert moment(pdf, m, 0) == pytest.approx(2.0, abs=1e-3)
    u = build_mesh([(0, 4)], [41])
    assert moment(np.full(41, 0.25), u, 0) == pytest.approx(2.0, rel=1e-14)
    sym = np.exp(-np.abs(u.nodes[:, 0] - 2.0))
    sym /= integrate(sym, u)
    assert moment(sym, u, 0) == pytest.approx(2.0, rel=1e-12)


@settings(max_examples=30)
@given(st.lists(st.floats(-2, 2), min_size=8, max_size=8), st.integers(3, 9), st.integers(3, 9))
def test_quadrature_exact_on_multilinear(c, n1, n2):
    m = build_mesh([(0, 2), (-1, 3)], [n1, n2])
    x, y = m.nodes[:, 0], m.nodes[:, 1]
    f = c[0] + c[1] * x + c[2] * y + c[3] * x * y
    # exact integral of the bilinear function over the rectangle
    exact = c[0] * 8 + c[1] * 2 * 4 + c[2] * 2 * 4 + c[3] * 2 * 4
    assert integrate(f, m) == pytest.approx(exact, rel=1e-12, abs=1e-12)


@settings(max_examples=30)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4),
       st.lists(st.floats(0, 1), min_size=10, max_size=10))
def test_interpolate_exact_on_multilinear(c, pts):
    m = build_mesh([(0, 1), (0, 1)], [5, 7])
    x, y = m.nodes[:, 0], m.nodes[:, 1]
    f = c[0] + c[1] * x + c[2] * y + c[3] * x * y
    p = np.array(pts).reshape(5, 2)
    exact = c[0] + c[1] * p[:, 0] + c[2] * p[:, 1] + c[3] * p[:, 0] * p[:, 1]
    assert np.allclose(interpolate(f, m, p), exact, atol=1e-12)


def test_interpolate_nodes_and_clamping():
    m = build_mesh([(0, 1)], [2 + 1])
    vals = np.array([0.0, 0.5, 1.0])
    assert interpolate(vals, m, np.array([[0.5]]))[0] == 0.5
    assert interpolate(vals, m, np.array([[0.25]]))[0] == pytest.approx(0.25)
    assert interpolate(vals, m, np.array([[7.0]]))[0] == 1.0
    assert interpolate(vals, m, np.array([[-3.0]]))[0] == 0.0


def test_product_density_moments():
    m = build_mesh([(-6, 6), (-6, 8)], [61, 71])
    x, y = m.nodes[:, 0], m.nodes[:, 1]
    d = np.exp(-0.5 * (x - 0.5) ** 2) * np.exp(-0.5 * ((y - 1.0) / 1.5) ** 2)
    d /= integrate(d, m)
    assert np.allclose(moments(d, m)[0], [0.5, 1.0], atol=1e-6)


def test_field_roundtrip(tmp_path):
    m = build_mesh([(0, 1), (0, 2)], [3, 4])
    tg = TimeGrid(0, 1, 0.5)
    f = Field(m, tg, np.arange(36, dtype=float).reshape(3, 12), "value")
    f.dump(tmp_path / "v")
    g = Field.load(tmp_path / "v")
    assert np.array_equal(f.values, g.values) and g.mesh == m and g.units == "value"


def test_field_shape_checked():
    m = build_mesh([(0, 1)], [3])
    with pytest.raises(GridError):
        Field(m, TimeGrid(0, 1, 0.5), np.zeros((2, 3)))
