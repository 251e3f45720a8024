import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from flowtopo.geometry import (
    ChartExitError,
    ChartManifold,
    MetricError,
    PiecewiseCurve,
    chart_distance,
    christoffel,
    curve_length,
    parallel_transport,
    transport_segments,
)


def sympy_christoffel(metric, point):
    n = len(metric)
    xs = sp.symbols(f"x1:{n + 1}")
    g = sp.Matrix([[sp.sympify(e.replace("^", "**"), locals={f"x{i + 1}": xs[i] for i in range(n)}) for e in row] for row in metric])
    ginv = g.inv()
    out = np.empty((n, n, n))
    sub = dict(zip(xs, point))
    for k in range(n):
        for i in range(n):
            for j in range(n):
                val = sum(
                    ginv[k, l] * (sp.diff(g[l, i], xs[j]) + sp.diff(g[l, j], xs[i]) - sp.diff(g[i, j], xs[l]))
                    for l in range(n)
                ) / 2
                out[k, i, j] = float(val.subs(sub))
    return out


def test_polar_christoffel_hand_values(polar):
    G = christoffel(polar, [2.0, 0.3])
    assert G[0, 1, 1] == pytest.approx(-2.0)
    assert G[1, 0, 1] == pytest.approx(0.5)
    assert G[1, 1, 0] == pytest.approx(0.5)
    assert G[0, 0, 0] == 0.0


@pytest.mark.parametrize(
    "metric",
    [
        [["exp(2*x1)", "0"], ["0", "exp(2*x1)"]],
        [["1 + x2^2", "x1*x2/4"], ["x1*x2/4", "2 + sin(x1)"]],
        [["1", "0"], ["0", "x1^2"]],
    ],
)
def test_christoffel_matches_sympy(metric):
    man = ChartManifold.build(2, [(0.5, 2.0), (-1.0, 1.0)], metric)
    pt = [1.1, 0.4]
    np.testing.assert_allclose(christoffel(man, pt), sympy_christoffel(metric, pt), atol=1e-12)


def test_flat_chart_detected():
    assert ChartManifold.euclidean(3).is_flat_chart
    man = ChartManifold.build(2, [(0.5, 2.0), (-1.0, 1.0)], [["2", "0"], ["0", "3"]])
    assert man.is_flat_chart and man.has_constant_metric


def test_non_pd_metric_has_witness():
    man = ChartManifold.build(1, [(-1.0, 1.0)], [["x1"]])
    with pytest.raises(MetricError) as info:
        man.metric_at(np.array([[0.5], [-0.5]]))
    assert info.value.point.tolist() == [-0.5]


def test_asymmetric_metric_rejected():
    with pytest.raises(MetricError):
        ChartManifold.build(2, [(0, 1), (0, 1)], [["1", "x1"], ["0", "1"]])


def test_require_inside():
    with pytest.raises(ChartExitError):
        ChartManifold.euclidean(1, 1.0).require_inside(np.array([[2.0]]))


def test_radial_transport_polar(polar):
    curve = PiecewiseCurve.through([[1.0, 0.0], [2.0, 0.0]])
    v = parallel_transport(polar, curve, [0.0, 1.0])
    assert v[0] == pytest.approx(0.0, abs=1e-12)
    assert v[1] == pytest.approx(0.5, abs=1e-9)


def test_flat_transport_is_identity():
    man = ChartManifold.euclidean(2)
    v = transport_segments(man, np.zeros((1, 2)), np.ones((1, 2)), np.array([[1.0, 2.0]]))
    assert v.tolist() == [[1.0, 2.0]]


def test_covector_and_vector_pairing_preserved(polar, rng):
    a = np.column_stack([rng.uniform(0.5, 3, 10), rng.uniform(-2, 2, 10)])
    b = np.column_stack([rng.uniform(0.5, 3, 10), rng.uniform(-2, 2, 10)])
    v = rng.normal(size=(10, 2))
    w = rng.normal(size=(10, 2))
    tv = transport_segments(polar, a, b, v, 0, 1)
    tw = transport_segments(polar, a, b, w, 1, 0)
    np.testing.assert_allclose(np.sum(tv * tw, axis=1), np.sum(v * w, axis=1), rtol=1e-7)


@given(st.floats(0.5, 4.0), st.floats(-3, 3), st.floats(0.5, 4.0), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_transport_is_isometry(r0, th0, r1, th1, v1, v2):
    man = ChartManifold.build(2, [(0.2, 5.0), (-4.0, 4.0)], [["1", "0"], ["0", "x1^2"]])
    if abs(v1) + abs(v2) < 1e-3:
        return
    a, b = np.array([[r0, th0]]), np.array([[r1, th1]])
    v = np.array([[v1, v2]])
    w = transport_segments(man, a, b, v)
    na = math.sqrt(v1**2 + r0**2 * v2**2)
    nb = math.sqrt(w[0, 0] ** 2 + r1**2 * w[0, 1] ** 2)
    assert nb == pytest.approx(na, rel=1e-7)


def test_curve_lengths(polar):
    assert curve_length(polar, PiecewiseCurve.through([[1.0, 0.0], [3.0, 0.0]])) == pytest.approx(2.0)
    # arc of the circle r=2 has length r*dtheta
    assert curve_length(polar, PiecewiseCurve.through([[2.0, 0.0], [2.0, 0.5]])) == pytest.approx(1.0)
    assert chart_distance(ChartManifold.euclidean(2), [0, 0], [3, 4]) == pytest.approx(5.0)


def test_curve_split_and_refine():
    c = PiecewiseCurve.through([[0.0], [1.0], [3.0]])
    left, right = c.split(0.25)
    assert left(1.0)[0] == pytest.approx(0.5)
    assert right(0.0)[0] == pytest.approx(0.5)
    r = c.refine(2)
    np.testing.assert_allclose(r(np.linspace(0, 1, 9)), c(np.linspace(0, 1, 9)))
