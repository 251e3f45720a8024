import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import RK45

from flowtopo.ode import StepSizeUnderflow, solve


def growth(t, y, idx, seg):
    return y


def test_exponential_growth():
    sol = solve(growth, 0.0, 1.0, np.array([[1.0]]))
    assert abs(sol.y[0, 0] - math.e) < 1e-8


def test_batch_matches_individual_solutions():
    y0 = np.array([[1.0], [2.0], [-0.5]])
    sol = solve(growth, 0.0, 1.0, y0)
    np.testing.assert_allclose(sol.y[:, 0], y0[:, 0] * math.e, rtol=1e-8)


def test_backward_integration():
    sol = solve(growth, 1.0, 0.0, np.array([[math.e]]))
    assert sol.y[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_breakpoints_split_piecewise_rhs():
    seen = set()

    def rhs(t, y, idx, seg):
        seen.add(seg)
        return np.full_like(y, 1.0 if seg == 0 else -1.0)

    sol = solve(rhs, 0.0, 1.0, np.zeros((1, 1)), breakpoints=[0.5])
    assert sol.y[0, 0] == pytest.approx(0.0, abs=1e-14)
    assert seen == {0, 1}


def test_box_exit_is_located():
    inside = lambda y: np.abs(y[:, 0]) < 10.0
    sol = solve(growth, 0.0, 5.0, np.array([[1.0], [0.001]]), inside=inside)
    assert sol.exited.tolist() == [True, False]
    assert sol.t_end[0] == pytest.approx(math.log(10.0), abs=1e-8)
    assert sol.y[1, 0] == pytest.approx(0.001 * math.exp(5.0), rel=1e-8)


def test_dense_output_matches_scipy_interpolant():
    # scipy's RK45 uses the same Dormand-Prince continuous extension
    sol = solve(lambda t, y, i, s: -2.0 * y + np.sin(t), 0.0, 2.0, np.array([[1.0]]), dense=True)
    for t in np.linspace(0.05, 1.95, 17):
        exact = 1.2 * math.exp(-2 * t) + (2 * math.sin(t) - math.cos(t)) / 5
        assert sol.dense(t, 0)[0] == pytest.approx(exact, abs=1e-8)
    ref = RK45(lambda t, y: -2.0 * y + np.sin(t), 0.0, np.array([1.0]), 2.0, rtol=1e-9, atol=1e-12)
    ref.step()
    interp = ref.dense_output()
    mid = 0.5 * (ref.t_old + ref.t)
    exact = 1.2 * math.exp(-2 * mid) + (2 * math.sin(mid) - math.cos(mid)) / 5
    assert abs(interp(mid)[0] - exact) < 1e-6


def test_stiff_problem_reports_underflow():
    def rhs(t, y, idx, seg):
        return y**2

    with pytest.raises((StepSizeUnderflow, RuntimeError)):
        solve(rhs, 0.0, 2.0, np.array([[1.0]]))


@given(st.floats(-2, 2), st.floats(0.1, 3.0))
def test_linear_flow_closed_form(a, T):
    sol = solve(lambda t, y, i, s: a * y, 0.0, T, np.array([[1.0]]))
    assert sol.y[0, 0] == pytest.approx(math.exp(a * T), rel=1e-7)


def test_error_decreases_with_tolerance():
    errs = []
    for tol in (1e-4, 1e-6, 1e-8, 1e-10):
        sol = solve(lambda t, y, i, s: -y * np.cos(t), 0.0, 5.0, np.array([[1.0]]), rtol=tol, atol=tol * 1e-3)
        errs.append(abs(sol.y[0, 0] - math.exp(-math.sin(5.0))))
    assert all(b < a for a, b in zip(errs, errs[1:]))
