import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowtopo.geometry import ChartManifold
from flowtopo.jets import VectorFieldExpr
from flowtopo.seminorms import (
    CompactSample,
    QuadratureError,
    SeminormSpec,
    TimeGrid,
    adaptive_quadrature,
    local_dilatation,
    parameter_gap,
    sectional_dilatation,
    seminorm,
    seminorm_cm,
    seminorm_hol,
    seminorm_lip,
    seminorm_omega_truncated,
    split_complex,
    time_integrated_seminorm,
)

LINE = ChartManifold.euclidean(1, 10.0)
K = CompactSample.grid([[-1, 1]], 257)


def field(src, n=1, k=0):
    return VectorFieldExpr.parse([src] if isinstance(src, str) else src, n, k)


def test_cm_hand_values():
    assert seminorm_cm(LINE, field("x1"), 0, (), K, 0) == pytest.approx(1.0, abs=1e-3)
    assert seminorm_cm(LINE, field("x1"), 0, (), K, 1) == pytest.approx(math.sqrt(2), abs=1e-3)
    assert seminorm_cm(LINE, field("x1^2"), 0, (), K, 2) == pytest.approx(math.sqrt(6), abs=1e-3)


def test_compact_sample_mesh():
    assert K.mesh == pytest.approx(2 / 256)
    assert CompactSample.from_points([[0.3]]).mesh == 0.0
    g = CompactSample.grid([[0, 1], [0, 2]], [3, 5])
    assert len(g) == 15 and g.mesh == pytest.approx(0.5)


def test_dilatation_abs_against_brute_force():
    xi = field("abs(x1)")
    K33 = CompactSample.grid([[-1, 1]], 33)
    got = sectional_dilatation(LINE, xi, 0, (), K33)
    v = np.abs(K33.points[:, 0])
    x = K33.points[:, 0]
    brute = max(abs(v[i] - v[j]) / abs(x[i] - x[j]) for i in range(33) for j in range(33) if i != j)
    assert got == pytest.approx(brute, abs=1e-12)
    assert got == pytest.approx(1.0, abs=1e-6)


def test_local_dilatation_shrinks():
    rep = local_dilatation(LINE, field("x1^2"), 0, (), [0.0])
    assert rep.radii[-1] == pytest.approx(0.02)
    assert all(b <= a for a, b in zip(rep.values, rep.values[1:]))
    assert rep.values[-1] < 0.05


def test_lip_on_wider_set():
    K2 = CompactSample.grid([[-2, 2]], 65)
    assert seminorm_lip(LINE, field("x1"), 0, (), K2, 0) == pytest.approx(2.0)


def test_omega_weights():
    # level 0: 1*|x|, level 1: (1*1/2)*sqrt(x^2+1) -> max 1/sqrt(2)
    val = seminorm_omega_truncated(LINE, field("x1"), 0, (), K, None, 1)
    assert val == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SeminormSpec("omega", 0, (1.0, -1.0))


def test_hol_polydisc():
    # z -> z on the unit polydisc in C^1, components (Re, Im)
    xi = VectorFieldExpr.parse(["x1", "x2"], 2)
    re, im = split_complex(xi)
    D = CompactSample.polydisc(1, 1.0)
    assert seminorm_hol(re, im, D) == pytest.approx(1.0)
    assert seminorm(ChartManifold.euclidean(2), xi, 0, (), D, SeminormSpec("hol")) == pytest.approx(1.0)


def test_quadrature_and_breakpoints():
    val, trace = adaptive_quadrature(lambda t: np.sin(t), TimeGrid(0, math.pi))
    assert val == pytest.approx(2.0, rel=1e-10)
    jump = lambda t: np.where(t < 0.3, 1.0, -2.0)
    v2, _ = adaptive_quadrature(jump, TimeGrid(0, 1, breakpoints=(0.3,)))
    assert v2 == pytest.approx(0.3 - 1.4, abs=1e-14)


def test_quadrature_nonconvergence_reports_trace():
    with pytest.raises(QuadratureError) as info:
        adaptive_quadrature(lambda t: np.sign(np.sin(200 * t)) / np.sqrt(np.abs(t - 0.5) + 1e-300), TimeGrid(0, 1), max_level=3)
    assert len(info.value.trace) >= 2


def test_time_integrated_and_gap():
    X = field("p1*x1*t", 1, 1)
    S = TimeGrid(0, 1)
    assert time_integrated_seminorm(LINE, X, (1.0,), K, S, SeminormSpec("m", 0)) == pytest.approx(0.5)
    T = field("p1", 1, 1)
    gap = parameter_gap(LINE, T, (1.3,), (1.0,), K, TimeGrid(0, 2), SeminormSpec("m", 1))
    assert gap == pytest.approx(0.6, abs=1e-9)


SPECS = [SeminormSpec("m", 0), SeminormSpec("m", 1), SeminormSpec("m", 2), SeminormSpec("inf", 2),
         SeminormSpec("m+lip", 1), SeminormSpec("omega", 0, m_max=3)]
K17 = CompactSample.grid([[-1, 1]], 17)
coef = st.floats(-3, 3, allow_nan=False)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}{s.order}")
@given(a=coef, b=coef, c=coef, lam=coef)
def test_seminorm_axioms(spec, a, b, c, lam):
    u = field(f"{a}*x1^2 + {b}*sin(x1)")
    v = field(f"{c}*cos(x1) + {b}*x1")
    pu = seminorm(LINE, u, 0, (), K17, spec)
    pv = seminorm(LINE, v, 0, (), K17, spec)
    assert seminorm(LINE, u.scale(lam), 0, (), K17, spec) == pytest.approx(abs(lam) * pu, rel=1e-12, abs=1e-12)
    assert seminorm(LINE, u + v, 0, (), K17, spec) <= pu + pv + 1e-12 * (1 + pu + pv)


def test_monotone_in_compact():
    xi = field("sin(3*x1)")
    small = CompactSample.grid([[-0.5, 0.5]], 65)
    big = small.union(CompactSample.grid([[-1, 1]], 65))
    assert seminorm_cm(LINE, xi, 0, (), small, 1) <= seminorm_cm(LINE, xi, 0, (), big, 1)


def test_mesh_refinement_converges():
    # true sup is 1; nested grids give a nondecreasing sampled sup within C * mesh
    xi = field("sin(5*x1 + 0.3)")
    grids = [CompactSample.grid([[-1, 1]], r) for r in (9, 17, 33, 65, 129)]
    vals = [seminorm_cm(LINE, xi, 0, (), g, 0) for g in grids]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    for g, v in zip(grids, vals):
        assert 1.0 - v <= 5.0 * g.mesh
