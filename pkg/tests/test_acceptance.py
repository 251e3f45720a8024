"""Acceptance criteria, one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` (or plain ``-v``; the
lines are written to the terminal either way).
"""
import filecmp
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import sympy as sp

from flowtopo import expr as ex
from flowtopo.config import ExperimentConfig
from flowtopo.flows import ExprCurve, LocalFlowNum, OffsetCurve, composite_continuity_probe, flow_axiom_check, integrate
from flowtopo.geometry import ChartManifold, PiecewiseCurve, parallel_transport
from flowtopo.harness import PASS, run_compactness, run_continuity
from flowtopo.invariants import axiom_samples, builtin_fields
from flowtopo.jets import VectorFieldExpr, covariant_jet, covariant_jets
from flowtopo.seminorms import (
    CompactSample,
    SeminormSpec,
    TimeGrid,
    local_dilatation,
    parameter_gap,
    sectional_dilatation,
    seminorm,
    seminorm_cm,
)

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def exponential_config(**over) -> ExperimentConfig:
    data = {
        "manifold": {"dim": 1, "box": [[-10, 10]]},
        "field": {"components": ["p1*x1"], "n_params": 1},
        "parameters": {"p0": [1.0], "delta": 1.0, "n": 10},
        "compact": {"box": [[0, 1]], "resolution": 64},
        "seminorm": {"kind": "m", "order": 1},
        "time": {"t0": 0.0, "t1": 1.0, "S": [0.0, 1.0]},
        "test_functions": ["x1"],
    }
    data.update(over)
    return ExperimentConfig.from_dict(data)


def test_closed_form_flow_oracle(report):
    t = time.perf_counter()
    traj = integrate(ChartManifold.euclidean(1, 10.0), VectorFieldExpr.parse(["x1"], 1), (), 0.0, 1.0, [1.0], tol=1e-9)
    dt = time.perf_counter() - t
    err = abs(traj.states[-1, 0] - math.e)
    report("closed-form flow x'=x", err <= 1e-7 and dt < 1.0, f"|x(1)-e|={err:.2e} (<=1e-7), {dt:.3f}s (<1s)")


def test_flow_axioms(report):
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    man = ChartManifold.euclidean(2, 100.0)
    worst_id, worst_co, n = 0.0, 0.0, 0
    fields = list(builtin_fields(2).values())
    counts = [34, 33, 33]
    for X, c in zip(fields, counts):
        rep = flow_axiom_check(LocalFlowNum(man, X, (), 1e-9), axiom_samples(rng, 2, c))
        worst_id = max(worst_id, rep.max_identity)
        worst_co = max(worst_co, rep.max_cocycle)
        n += len(rep.cocycle_residuals)
    dt = time.perf_counter() - t
    ok = worst_id == 0.0 and worst_co <= 1e-6 and n == 100 and dt < 10
    report("flow axioms", ok, f"identity={worst_id}, cocycle={worst_co:.2e} (<=1e-6) over {n} samples, {dt:.2f}s (<10s)")


def _sympy_christoffel(metric, point):
    xs = sp.symbols("x1:3")
    g = sp.Matrix([[sp.sympify(e.replace("^", "**"), locals={"x1": xs[0], "x2": xs[1]}) for e in row] for row in metric])
    gi = g.inv()
    out = np.empty((2, 2, 2))
    for k in range(2):
        for i in range(2):
            for j in range(2):
                v = sum(gi[k, l] * (sp.diff(g[l, i], xs[j]) + sp.diff(g[l, j], xs[i]) - sp.diff(g[i, j], xs[l])) for l in range(2)) / 2
                out[k, i, j] = float(v.subs(dict(zip(xs, point))))
    return out


def test_jet_oracle(report):
    rng = np.random.default_rng(11)
    flat = ChartManifold.euclidean(2)
    worst = 0.0
    for _ in range(50):
        terms = " + ".join(
            f"{rng.integers(-3, 4)}*x1^{rng.integers(0, 4)}*x2^{rng.integers(0, 4)}" for _ in range(3)
        )
        src = f"{terms} + {rng.choice(['sin', 'cos'])}({rng.integers(1, 3)}*x1 - x2)"
        xi = VectorFieldExpr.parse([src, "x1*x2"], 2)
        pt = rng.uniform(-1, 1, 2)
        jets = covariant_jets(flat, xi, 0.0, (), pt[None], 4)
        ref = ex.jet_evaluate(xi.components_at(0)[0], {"x1": pt[0], "x2": pt[1]}, 4)
        for alpha, val in ref.items():
            idx = tuple(i for i, k in enumerate(alpha) for _ in range(k))
            got = float(jets[len(idx)][(0,) + idx + (0,)])
            worst = max(worst, abs(got - val) / max(1.0, abs(val)))
    metric = [["1", "0"], ["0", "x1^2"]]
    polar = ChartManifold.build(2, [(0.2, 5.0), (-4.0, 4.0)], metric)
    xi = VectorFieldExpr.parse(["x1*cos(x2)", "sin(x1)*x2^2"], 2)
    curved = 0.0
    for pt in rng.uniform([0.5, -2], [3, 2], (10, 2)):
        env = {"x1": pt[0], "x2": pt[1], "t": 0.0}
        comps = xi.components_at(0)
        d = np.array([[float(ex.evaluate(ex.differentiate(c, f"x{a + 1}"), env)) for c in comps] for a in range(2)])
        val = np.array([float(ex.evaluate(c, env)) for c in comps])
        expected = d + np.einsum("kai,i->ak", _sympy_christoffel(metric, pt), val)
        got = covariant_jet(polar, xi, 0.0, (), pt, 1).entries[1]
        curved = max(curved, float(np.max(np.abs(got - expected))))
    ok = worst <= 1e-12 and curved <= 1e-10
    report("jet oracle", ok, f"flat rel err={worst:.1e} (<=1e-12, 50 fields, m<=4); curved m=1 err={curved:.1e} (<=1e-10)")


def test_seminorm_hand_values(report):
    man = ChartManifold.euclidean(1, 10.0)
    K = CompactSample.grid([[-1, 1]], 257)
    vals = [
        seminorm_cm(man, VectorFieldExpr.parse(["x1"], 1), 0, (), K, 0),
        seminorm_cm(man, VectorFieldExpr.parse(["x1"], 1), 0, (), K, 1),
        seminorm_cm(man, VectorFieldExpr.parse(["x1^2"], 1), 0, (), K, 2),
    ]
    want = [1.0, math.sqrt(2), math.sqrt(6)]
    errs = [abs(a - b) for a, b in zip(vals, want)]
    report("seminorm hand values", max(errs) <= 1e-3, f"p0={vals[0]!r}, p1={vals[1]!r}, p2={vals[2]!r}, max err={max(errs):.1e} (<=1e-3)")


def test_dilatation(report):
    man = ChartManifold.euclidean(1, 10.0)
    K = CompactSample.grid([[-1, 1]], 257)
    xi = VectorFieldExpr.parse(["abs(x1)"], 1)
    got = sectional_dilatation(man, xi, 0, (), K)
    x = K.points[:, 0]
    v = np.abs(x)
    dx = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(dx, np.inf)
    brute = float(np.max(np.abs(v[:, None] - v[None, :]) / dx))
    loc = local_dilatation(man, VectorFieldExpr.parse(["x1^2"], 1), 0, (), [0.0])
    decreasing = all(b <= a for a, b in zip(loc.values, loc.values[1:]))
    ok = abs(got - 1.0) <= 1e-6 and abs(got - brute) <= 1e-12 and decreasing and loc.radii[-1] == pytest.approx(0.02) and loc.values[-1] < 0.05
    report("dilatation", ok, f"|x|: {got!r} (brute {brute!r}); local x^2 radii->{loc.radii[-1]:.3f}, value {loc.values[-1]:.4f} (<0.05), decreasing={decreasing}")


def test_seminorm_axioms(report):
    rng = np.random.default_rng(3)
    line = ChartManifold.euclidean(1, 10.0)
    plane = ChartManifold.euclidean(2, 10.0)
    K = CompactSample.grid([[-1, 1]], 17)
    D = CompactSample.polydisc(1, 1.0, 5, 8)
    classes = {
        "m0": (line, K, SeminormSpec("m", 0), 1),
        "m2": (line, K, SeminormSpec("m", 2), 1),
        "m+lip1": (line, K, SeminormSpec("m+lip", 1), 1),
        "inf3": (line, K, SeminormSpec("inf", 3), 1),
        "omega3": (line, K, SeminormSpec("omega", 0, m_max=3), 1),
        "hol": (plane, D, SeminormSpec("hol"), 2),
    }
    worst_h, worst_t = 0.0, -math.inf
    for name, (man, KK, spec, n) in classes.items():
        for _ in range(50):
            c = rng.uniform(-2, 2, 4)
            if n == 1:
                u = VectorFieldExpr.parse([f"{c[0]}*x1^2 + {c[1]}*sin(x1)"], 1)
                w = VectorFieldExpr.parse([f"{c[2]}*cos(x1) + {c[3]}*x1"], 1)
            else:
                u = VectorFieldExpr.parse([f"{c[0]}*x1 - {c[1]}*x2", f"{c[1]}*x1 + {c[0]}*x2"], 2)
                w = VectorFieldExpr.parse([f"{c[2]}*(x1^2 - x2^2)", f"{c[2]}*2*x1*x2 + {c[3]}"], 2)
            lam = float(rng.uniform(-3, 3))
            pu, pw = seminorm(man, u, 0, (), KK, spec), seminorm(man, w, 0, (), KK, spec)
            hom = abs(seminorm(man, u.scale(lam), 0, (), KK, spec) - abs(lam) * pu) / max(1.0, abs(lam) * pu)
            tri = (seminorm(man, u + w, 0, (), KK, spec) - pu - pw) / max(1.0, pu + pw)
            worst_h, worst_t = max(worst_h, hom), max(worst_t, tri)
    ok = worst_h <= 1e-12 and worst_t <= 1e-12
    report("seminorm axioms", ok, f"homogeneity err={worst_h:.1e} (<=1e-12), triangle excess={worst_t:.1e} over 50 pairs x {len(classes)} classes")


def test_parameter_gap(report):
    man = ChartManifold.euclidean(1, 10.0)
    X = VectorFieldExpr.parse(["p1"], 1, 1)
    K = CompactSample.grid([[0, 1]], 33)
    worst = 0.0
    for p, a, b in [(1.7, 0.0, 1.0), (-0.3, 0.0, 2.5), (1.01, -1.0, 1.0)]:
        for spec in (SeminormSpec("m", 0), SeminormSpec("m", 2)):
            g = parameter_gap(man, X, (p,), (1.0,), K, TimeGrid(a, b), spec)
            worst = max(worst, abs(g - abs(p - 1.0) * (b - a)))
    report("parameter gap of p*d/dx", worst <= 1e-9, f"max |gap - |p-p0||S||={worst:.1e} (<=1e-9)")


@pytest.fixture(scope="module")
def continuity_report():
    t = time.perf_counter()
    rep = run_continuity(exponential_config())
    return rep, time.perf_counter() - t


def test_continuity_nu0(report, continuity_report):
    rep, dt = continuity_report
    errs = [abs(r.semimetric_nu0 - abs(math.exp(1 + 2.0**-r.k) - math.e)) for r in rep.rows]
    ok = max(errs) <= 1e-6 and rep.verdicts[0]["semimetric_nu0"] == PASS and rep.verdict == PASS and dt < 30
    report("continuity nu=0 column", ok, f"max row err={max(errs):.1e} (<=1e-6), verdict={rep.verdict}, {dt:.2f}s (<30s)")


def test_continuity_nu1_literal(report, continuity_report):
    # literal criterion; the first-order jet gap of x e^{p} is sqrt(x^2+1)|e^{p_k}-e|, see the ledger
    rep, dt = continuity_report
    errs = [abs(r.semimetric_num - abs((1 + 2.0**-r.k) * math.exp(1 + 2.0**-r.k) - math.e)) for r in rep.rows]
    report("continuity nu=1 vs |p_k e^{p_k} - e|", max(errs) <= 1e-5, f"max row err={max(errs):.3e} (<=1e-5)")


def test_continuity_nu1_jet_closed_form(report, continuity_report):
    rep, _ = continuity_report
    errs = [abs(r.semimetric_num - math.sqrt(2) * abs(math.exp(1 + 2.0**-r.k) - math.e)) for r in rep.rows]
    ok = max(errs) <= 1e-5 and rep.verdicts[0]["semimetric_num"] == PASS
    report("continuity nu=1 vs sqrt(2)|e^{p_k} - e|", ok, f"max row err={max(errs):.1e} (<=1e-5), verdict={rep.verdicts[0]['semimetric_num']}")


def test_compactness(report):
    rep = run_compactness(exponential_config())
    report("compactness bounding box", rep.verdict == PASS and rep.k_star == 1, f"verdict={rep.verdict}, k*={rep.k_star} (want 1)")


def test_composite_linear(report):
    man = ChartManifold.euclidean(1, 10.0)
    gamma = ExprCurve(["t"])
    S = TimeGrid(0.0, 1.0)
    js = range(1, 17)
    rep = composite_continuity_probe(man, VectorFieldExpr.scalar("x1", 1), gamma, [OffsetCurve(gamma, [1.0 / j]) for j in js], S)
    err = max(abs(d - S.length / j) for d, j in zip(rep.differences, js))
    report("composite linear case", err <= 1e-12, f"max |diff - |S|/j|={err:.1e} (<=1e-12)")


def test_metric_compatibility(report):
    man = ChartManifold.build(2, [(0.2, 5.0), (-4.0, 4.0)], [["1", "0"], ["0", "x1^2"]])
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        pts = np.column_stack([rng.uniform(0.5, 4.0, 4), rng.uniform(-3, 3, 4)])
        v = rng.normal(size=2)
        w = parallel_transport(man, PiecewiseCurve.through(pts), v)
        na = math.sqrt(v[0] ** 2 + pts[0, 0] ** 2 * v[1] ** 2)
        nb = math.sqrt(w[0] ** 2 + pts[-1, 0] ** 2 * w[1] ** 2)
        worst = max(worst, abs(na - nb) / na)
    radial = parallel_transport(man, PiecewiseCurve.through([[1.0, 0.0], [2.0, 0.0]]), [0.0, 1.0])
    rerr = float(np.max(np.abs(radial - [0.0, 0.5])))
    report("metric compatibility", worst <= 1e-6 and rerr <= 1e-7, f"norm rel err={worst:.1e} (<=1e-6), radial err={rerr:.1e} (<=1e-7)")


def test_determinism(report, tmp_path):
    cfg = ROOT / "configs" / "exponential.json"
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "flowtopo", "run", str(cfg), "--out", str(out), "--threads", "2"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stdout + proc.stderr
        outs.append(out)
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    match, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], csvs, shallow=False)
    ok = bool(csvs) and not mismatch and not errors
    report("determinism", ok, f"{len(match)}/{len(csvs)} CSVs byte-identical")
