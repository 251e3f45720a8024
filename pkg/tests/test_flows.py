import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowtopo.geometry import ChartManifold
from flowtopo.jets import VectorFieldExpr
from flowtopo.flows import (
    ExprCurve,
    FlowDomainError,
    LocalFlowNum,
    OffsetCurve,
    composite_continuity_probe,
    composite_integral,
    diffeomorphism_check,
    flow_ac_seminorm,
    flow_axiom_check,
    flow_semimetric,
    integrate,
)
from flowtopo.seminorms import CompactSample, SeminormSpec, TimeGrid

BIG = ChartManifold.euclidean(1, 100.0)
K01 = CompactSample.grid([[0, 1]], 33)
X1 = VectorFieldExpr.scalar("x1", 1)


def vf(src, n=1, k=0):
    return VectorFieldExpr.parse([src] if isinstance(src, str) else src, n, k)


def test_closed_form_exponential():
    traj = integrate(BIG, vf("p1*x1", 1, 1), (1.0,), 0.0, 1.0, [1.0], tol=1e-9)
    assert abs(traj.states[-1, 0] - math.e) <= 1e-7
    assert traj(0.5)[0] == pytest.approx(math.exp(0.5), rel=1e-8)
    assert not traj.exited


def test_constant_and_piecewise_fields():
    assert LocalFlowNum(BIG, vf("1"))(1.0, 0.0, [0.0])[0] == pytest.approx(1.0, abs=1e-14)
    pw = VectorFieldExpr.piecewise([(0.5, ["1"]), (math.inf, ["-1"])], 1)
    assert LocalFlowNum(BIG, pw)(1.0, 0.0, [0.0])[0] == pytest.approx(0.0, abs=1e-14)


def test_exit_is_a_result():
    man = ChartManifold.euclidean(1, 5.0)
    traj = integrate(man, vf("x1"), (), 0.0, 3.0, [1.0])
    assert traj.exited and traj.t_exit == pytest.approx(math.log(5.0), abs=1e-8)
    with pytest.raises(FlowDomainError):
        LocalFlowNum(man, vf("x1"))(3.0, 0.0, [1.0])


def test_identity_is_exact():
    flow = LocalFlowNum(BIG, vf("sin(t)*x1 + 1"))
    x = np.array([0.123456789])
    assert flow(0.7, 0.7, x).tolist() == x.tolist()


def test_cocycle_on_linear_field(rng):
    flow = LocalFlowNum(BIG, vf("x1"))
    samples = [(*rng.uniform(0, 1, 3).tolist(), rng.uniform(-1, 1, 1)) for _ in range(20)]
    rep = flow_axiom_check(flow, samples)
    assert rep.max_identity == 0.0 and rep.max_cocycle <= 1e-6


def test_constant_field_additivity(rng):
    flow = LocalFlowNum(ChartManifold.euclidean(2, 100.0), vf(["1", "-2"], 2))
    samples = [(*rng.uniform(0, 1, 3).tolist(), rng.uniform(-1, 1, 2)) for _ in range(20)]
    assert flow_axiom_check(flow, samples).max_cocycle <= 1e-12


def test_axiom_check_skips_exits():
    flow = LocalFlowNum(ChartManifold.euclidean(1, 2.0), vf("x1"))
    rep = flow_axiom_check(flow, [(0.0, 1.0, 2.0, [1.5])])
    assert len(rep.skipped) == 1


def test_variational_jets_match_finite_differences():
    X = vf(["-x2 + 0.1*x1^2", "x1 + sin(x2)*t"], 2)
    flow = LocalFlowNum(ChartManifold.euclidean(2, 50.0), X)
    pts = np.array([[0.3, -0.2], [1.0, 0.5]])
    b = flow.map(1.0, 0.0, pts, order=2)
    h = 1e-4
    for a in range(2):
        e = np.eye(2)[a] * h
        fd = (flow.map(1.0, 0.0, pts + e).states - flow.map(1.0, 0.0, pts - e).states) / (2 * h)
        np.testing.assert_allclose(b.jac[:, :, a], fd, rtol=1e-5, atol=1e-7)
        fd2 = (flow.map(1.0, 0.0, pts + e, order=1).jac - flow.map(1.0, 0.0, pts - e, order=1).jac) / (2 * h)
        np.testing.assert_allclose(b.hess[:, :, :, a], fd2, rtol=1e-4, atol=1e-6)


def test_semimetric_affine_examples():
    a = LocalFlowNum(BIG, vf("1"))
    b = LocalFlowNum(BIG, vf("2"))
    assert flow_semimetric(a, b, 1.0, 0.0, K01, X1) == pytest.approx(1.0, abs=1e-12)
    assert flow_semimetric(a, a, 1.0, 0.0, K01, X1) == 0.0
    T = vf("p1", 1, 1)
    d = flow_semimetric(LocalFlowNum(BIG, T, (1.3,)), LocalFlowNum(BIG, T, (1.0,)), 2.0, 0.0, K01, X1)
    assert d == pytest.approx(0.6, abs=1e-9)


def test_semimetric_first_order_closed_form():
    X = vf("p1*x1", 1, 1)
    d = flow_semimetric(LocalFlowNum(BIG, X, (1.5,)), LocalFlowNum(BIG, X, (1.0,)), 1.0, 0.0, K01, X1, SeminormSpec("m", 1))
    # f o Phi = x e^p, 1-jet norm sqrt(x^2 + 1) |e^p - e| maximal at x = 1
    assert d == pytest.approx(math.sqrt(2) * abs(math.exp(1.5) - math.e), rel=1e-8)


def test_semimetric_order_limit():
    flow = LocalFlowNum(BIG, vf("x1"))
    with pytest.raises(ValueError):
        flow_semimetric(flow, flow, 1.0, 0.0, K01, X1, SeminormSpec("m", 3))


def test_semimetric_requires_defined_flow():
    man = ChartManifold.euclidean(1, 2.0)
    flow = LocalFlowNum(man, vf("x1"))
    with pytest.raises(FlowDomainError):
        flow_semimetric(flow, flow, 2.0, 0.0, K01, X1)


@given(st.floats(0.5, 1.5), st.floats(0.5, 1.5), st.floats(0.5, 1.5))
def test_semimetric_axioms(p, q, r):
    X = vf("p1*x1 + sin(x1)", 1, 1)
    K = CompactSample.grid([[0, 1]], 9)
    F = {v: LocalFlowNum(BIG, X, (v,)) for v in (p, q, r)}
    for spec in (SeminormSpec("m", 0), SeminormSpec("m", 2)):
        d = lambda a, b: flow_semimetric(F[a], F[b], 1.0, 0.0, K, X1, spec)
        assert d(p, q) == d(q, p)
        assert d(p, r) <= d(p, q) + d(q, r) + 1e-12


def test_semimetric_monotone_in_compact():
    X = vf("p1*x1", 1, 1)
    a, b = LocalFlowNum(BIG, X, (1.2,)), LocalFlowNum(BIG, X, (1.0,))
    small = CompactSample.grid([[0, 0.5]], 9)
    assert flow_semimetric(a, b, 1.0, 0.0, small, X1) <= flow_semimetric(a, b, 1.0, 0.0, K01, X1)


def test_ac_seminorm_translation():
    flow = LocalFlowNum(BIG, vf("1"))
    value, sup_part, integral = flow_ac_seminorm(flow, K01, (0, 1), (0, 1), X1)
    assert sup_part == pytest.approx(2.0)
    assert integral == pytest.approx(1.0)
    assert value == pytest.approx(2.0)
    v2, s2, i2 = flow_ac_seminorm(flow, K01, (0, 1), (0, 1), VectorFieldExpr.scalar("2*x1", 1))
    assert (s2, i2) == pytest.approx((2 * sup_part, 2 * integral))


def test_ac_seminorm_zero_field():
    flow = LocalFlowNum(BIG, vf("0"))
    value, sup_part, integral = flow_ac_seminorm(flow, K01, (0, 1), (0, 1), X1)
    assert sup_part == pytest.approx(1.0) and integral == 0.0


def test_composite_integrals():
    S = TimeGrid(0, 1)
    assert composite_integral(X1, ExprCurve(["t"]), S) == pytest.approx(0.5)
    assert composite_integral(VectorFieldExpr.scalar("t*x1", 1), ExprCurve(["1"]), S) == pytest.approx(0.5)
    assert composite_integral(VectorFieldExpr.scalar("sin(x1)", 1), ExprCurve(["t"]), TimeGrid(0, math.pi)) == pytest.approx(2.0)


def test_composite_probe_lipschitz_bound():
    gamma = ExprCurve(["t"])
    f = VectorFieldExpr.scalar("sin(2*x1)", 1)
    S = TimeGrid(0, 1)
    rep = composite_continuity_probe(BIG, f, gamma, [OffsetCurve(gamma, [1.0 / j]) for j in range(1, 9)], S)
    for j, diff in enumerate(rep.differences, start=1):
        assert diff <= 2.0 * (1.0 / j) * 1.0 + 1e-12
    same = composite_continuity_probe(BIG, f, gamma, [gamma], S)
    assert same.differences == [0.0]
    flat = composite_continuity_probe(BIG, VectorFieldExpr.scalar("t^2", 1), gamma, [OffsetCurve(gamma, [0.5])], S)
    assert flat.differences == [0.0]


def test_composite_along_trajectory():
    traj = integrate(BIG, vf("1"), (), 0.0, 1.0, [0.0])
    assert composite_integral(X1, traj, TimeGrid(0, 1)) == pytest.approx(0.5, abs=1e-10)


def test_diffeomorphism_surrogate():
    flow = LocalFlowNum(ChartManifold.euclidean(2, 50.0), vf(["-x2", "x1"], 2))
    rep = diffeomorphism_check(flow, 1.0, 0.0, CompactSample.grid([[-1, 1], [-1, 1]], 5))
    assert rep["ok"] and rep["min_abs_det"] == pytest.approx(1.0, rel=1e-7)


def test_threaded_cache_consistent():
    from concurrent.futures import ThreadPoolExecutor

    flow = LocalFlowNum(BIG, vf("sin(x1) + t"))
    pts = np.linspace(0, 1, 16)[:, None]
    with ThreadPoolExecutor(4) as pool:
        out = list(pool.map(lambda _: flow.map(1.0, 0.0, pts).states.copy(), range(8)))
    for o in out[1:]:
        assert np.array_equal(o, out[0])


def test_tolerance_refinement_reduces_error():
    X = vf("-x1*cos(t)")
    errs = []
    for tol in (1e-4, 1e-6, 1e-8, 1e-10):
        x = LocalFlowNum(BIG, X, (), tol)(5.0, 0.0, [1.0])[0]
        errs.append(abs(x - math.exp(-math.sin(5.0))))
    assert all(b < a for a, b in zip(errs, errs[1:]))
