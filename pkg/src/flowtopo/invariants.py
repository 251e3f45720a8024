"""Seeded invariant suite over a configured manifold, field and compact set.

Each check returns a :class:`Check`; exceptions inside a check become a
failed check carrying the error text, so one broken module cannot hide the
others.  A non positive-definite metric fails with the witness point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import expr as ex
from .config import ExperimentConfig
from .flows import LocalFlowNum, diffeomorphism_check, flow_axiom_check, flow_semimetric
from .geometry import ChartManifold, MetricError, transport_segments
from .jets import VectorFieldExpr, covariant_jets
from .seminorms import CompactSample, SeminormSpec, seminorm


@dataclass
class Check:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    counterexample: dict | None = None

    def as_dict(self) -> dict:
        out = {"name": self.name, "passed": self.passed, "details": self.details}
        if self.counterexample is not None:
            out["counterexample"] = self.counterexample
        return out


class _Ctx:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.man = cfg.build_manifold()
        self.X = cfg.build_field()
        self.K = cfg.build_compact()
        self.p0 = tuple(cfg.parameters.p0)
        self.pk = cfg.parameters.values()
        self.tol = cfg.tolerances.flow
        self.t0, self.t1 = cfg.time.t0, cfg.time.t1

    def interior_points(self, n: int, shrink: float = 0.5) -> np.ndarray:
        box = np.asarray(self.man.box)
        c, h = box.mean(axis=1), 0.5 * (box[:, 1] - box[:, 0]) * shrink
        return c + h * self.rng.uniform(-1, 1, size=(n, self.man.dim))

    def k_points(self, n: int) -> np.ndarray:
        idx = self.rng.choice(len(self.K.points), size=min(n, len(self.K.points)), replace=False)
        return self.K.points[np.sort(idx)]


# ---------------------------------------------------------------------------
# expression core
# ---------------------------------------------------------------------------


def _random_expr(rng: np.random.Generator, n: int, depth: int) -> ex.Expr:
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.5:
            return ex.Var(f"x{rng.integers(1, n + 1)}")
        return ex.Const(float(np.round(rng.uniform(-3, 3), 3)))
    op = rng.integers(0, 6)
    a = _random_expr(rng, n, depth - 1)
    if op == 0:
        return ex.add(a, _random_expr(rng, n, depth - 1))
    if op == 1:
        return ex.sub(a, _random_expr(rng, n, depth - 1))
    if op == 2:
        return ex.mul(a, _random_expr(rng, n, depth - 1))
    if op == 3:
        return ex.power(a, int(rng.integers(0, 4)))
    if op == 4:
        return ex.call(str(rng.choice(["sin", "cos", "tanh"])), a)
    return ex.neg(a)


def check_expr_roundtrip(c: _Ctx) -> Check:
    n = c.man.dim
    worst, bad = 0.0, None
    for _ in range(40):
        e = _random_expr(c.rng, n, 4)
        back = ex.parse(ex.to_source(e), n)
        pts = c.interior_points(8)
        env = {f"x{i + 1}": pts[:, i] for i in range(n)}
        a = np.broadcast_to(ex.evaluate(e, env), (8,))
        b = np.broadcast_to(ex.evaluate(back, env), (8,))
        err = float(np.max(np.abs(a - b)))
        if err > worst:
            worst, bad = err, ex.to_source(e)
    ok = worst == 0.0
    return Check("expr.roundtrip", ok, {"max_abs_diff": worst}, None if ok else {"expr": bad})


def check_expr_derivative(c: _Ctx) -> Check:
    n = c.man.dim
    X = c.X.bind(c.p0)
    pts = c.k_points(10)
    h = 1e-5
    worst, bad = 0.0, None
    for t in (c.t0, c.t1):
        for comp in X.components_at(t):
            for i in range(n):
                d = ex.differentiate(comp, f"x{i + 1}")
                e = np.eye(n)[i] * h
                env = lambda P: {"t": float(t), **{f"x{j + 1}": P[:, j] for j in range(n)}}
                fd = (np.broadcast_to(ex.evaluate(comp, env(pts + e)), (len(pts),))
                      - np.broadcast_to(ex.evaluate(comp, env(pts - e)), (len(pts),))) / (2 * h)
                an = np.broadcast_to(ex.evaluate(d, env(pts)), (len(pts),))
                err = float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))
                if err > worst:
                    worst, bad = err, {"component": ex.to_source(comp), "var": f"x{i + 1}"}
    ok = worst <= 1e-5
    return Check("expr.derivative_vs_fd", ok, {"max_rel_err": worst}, None if ok else bad)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def check_metric_pd(c: _Ctx) -> Check:
    pts = np.vstack([c.K.points, c.interior_points(200, shrink=0.99)])
    try:
        c.man.metric_at(pts)
    except MetricError as err:
        return Check("geometry.metric_positive_definite", False, {"error": str(err)},
                     {"witness": err.point.tolist() if err.point is not None else None})
    return Check("geometry.metric_positive_definite", True, {"n_points": len(pts)})


def check_torsion_free(c: _Ctx) -> Check:
    G = c.man.christoffel_at(c.k_points(20))
    asym = float(np.max(np.abs(G - np.transpose(G, (0, 1, 3, 2)))))
    ok = asym <= 1e-12 or not c.man.torsion_free
    return Check("geometry.christoffel_symmetric", ok, {"max_asymmetry": asym})


def check_transport_isometry(c: _Ctx) -> Check:
    a = c.interior_points(20)
    b = c.interior_points(20)
    v = c.rng.normal(size=(20, c.man.dim))
    w = transport_segments(c.man, a, b, v)
    Ga, Gb = c.man.metric_at(a), c.man.metric_at(b)
    na = np.sqrt(np.einsum("pi,pij,pj->p", v, Ga, v))
    nb = np.sqrt(np.einsum("pi,pij,pj->p", w, Gb, w))
    rel = np.abs(na - nb) / na
    i = int(np.argmax(rel))
    ok = float(rel[i]) <= 1e-6
    return Check("geometry.transport_preserves_norm", ok, {"max_rel_err": float(rel[i])},
                 None if ok else {"start": a[i].tolist(), "end": b[i].tolist(), "vector": v[i].tolist()})


# ---------------------------------------------------------------------------
# jets and seminorms
# ---------------------------------------------------------------------------


def check_jet_symmetry(c: _Ctx) -> Check:
    X = c.X.bind(c.p0)
    pts = c.k_points(10)
    jets = covariant_jets(c.man, X, c.t0, (), pts, 3)
    worst = 0.0
    for j, T in enumerate(jets[2:], start=2):
        for a in range(1, j):
            perm = list(range(T.ndim))
            perm[1], perm[1 + a] = perm[1 + a], perm[1]
            worst = max(worst, float(np.max(np.abs(T - np.transpose(T, perm)))))
    return Check("jets.symmetric", worst == 0.0, {"max_asymmetry": worst})


def _seminorm_specs() -> list[SeminormSpec]:
    return [SeminormSpec("m", 0), SeminormSpec("m", 1), SeminormSpec("m", 2), SeminormSpec("omega", 0, m_max=2)]


def check_seminorm_axioms(c: _Ctx) -> Check:
    A = c.X.bind(c.p0)
    B = c.X.bind(c.pk[0])
    K = CompactSample.from_points(c.k_points(16))
    out = {}
    bad = None
    ok = True
    for spec in _seminorm_specs():
        name = f"{spec.kind}{spec.order if spec.kind != 'omega' else spec.m_max}"
        pa = seminorm(c.man, A, c.t0, (), K, spec)
        pb = seminorm(c.man, B, c.t0, (), K, spec)
        lam = float(c.rng.uniform(-3, 3))
        ps = seminorm(c.man, A.scale(lam), c.t0, (), K, spec)
        hom = abs(ps - abs(lam) * pa)
        tri = seminorm(c.man, A + B, c.t0, (), K, spec) - (pa + pb)
        out[name] = {"homogeneity_err": hom, "triangle_excess": tri}
        if hom > 1e-12 * max(1.0, abs(lam) * pa) or tri > 1e-12 * max(1.0, pa + pb):
            ok = False
            bad = {"spec": name, "lambda": lam}
    return Check("seminorms.axioms", ok, out, bad)


def check_seminorm_monotone(c: _Ctx) -> Check:
    A = c.X.bind(c.p0)
    small = CompactSample.from_points(c.K.points[: max(2, len(c.K.points) // 2)])
    spec = SeminormSpec("m", 1)
    a = seminorm(c.man, A, c.t0, (), small, spec)
    b = seminorm(c.man, A, c.t0, (), c.K, spec)
    return Check("seminorms.monotone_in_K", a <= b + 1e-15, {"subset": a, "full": b})


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------


def builtin_fields(n: int) -> dict[str, VectorFieldExpr]:
    """Smooth reference fields used for the flow-axiom checks."""
    lin = VectorFieldExpr.parse([f"x{i + 1}" for i in range(n)], n)
    const = VectorFieldExpr.parse(["1"] * n, n)
    if n >= 2:
        rot = VectorFieldExpr.parse(["-x2", "x1"] + ["0"] * (n - 2), n)
    else:
        rot = VectorFieldExpr.parse(["sin(t)*x1"], n)
    return {"linear": lin, "constant": const, "rotation" if n >= 2 else "time_dependent": rot}


def axiom_samples(rng: np.random.Generator, n: int, count: int, t_lo=0.0, t_hi=1.0, half=1.0):
    out = []
    for _ in range(count):
        ts = rng.uniform(t_lo, t_hi, 3)
        out.append((float(ts[0]), float(ts[1]), float(ts[2]), rng.uniform(-half, half, n)))
    return out


def check_flow_axioms(c: _Ctx) -> Check:
    n = c.man.dim
    fields = {"config": (c.X, c.p0)}
    fields.update({k: (v, ()) for k, v in builtin_fields(n).items()})
    lo, hi = sorted((c.t0, c.t1))
    details, ok, bad = {}, True, None
    box = ChartManifold.euclidean(n, 100.0)
    for name, (X, p) in fields.items():
        man = c.man if name == "config" else box
        flow = LocalFlowNum(man, X, p, c.tol)
        if name == "config":
            pts = c.k_points(25)
            samples = [(float(a), float(b), float(d), x) for (a, b, d, _), x in
                       zip(axiom_samples(c.rng, n, len(pts), lo, hi), pts)]
        else:
            samples = axiom_samples(c.rng, n, 25)
        rep = flow_axiom_check(flow, samples)
        # relative tolerance scaled by the largest state involved
        scale = 100 * c.tol * max(1.0, max((float(np.max(np.abs(s[3]))) for s in samples), default=1.0))
        details[name] = {
            "max_identity": rep.max_identity,
            "max_cocycle": rep.max_cocycle,
            "skipped": len(rep.skipped),
            "cocycle_bound": scale,
        }
        if rep.max_identity != 0.0 or rep.max_cocycle > scale:
            ok, bad = False, {"field": name}
    return Check("flows.axioms", ok, details, bad)


def check_variational_fd(c: _Ctx) -> Check:
    flow = LocalFlowNum(c.man, c.X, c.p0, c.tol)
    pts = c.k_points(8)
    b = flow.map(c.t1, c.t0, pts, order=1)
    n, h = c.man.dim, 1e-5
    fd = np.empty_like(b.jac)
    for a in range(n):
        e = np.eye(n)[a] * h
        fp = flow.map(c.t1, c.t0, pts + e).states
        fm = flow.map(c.t1, c.t0, pts - e).states
        fd[:, :, a] = (fp - fm) / (2 * h)
    rel = float(np.max(np.abs(fd - b.jac)) / max(1.0, float(np.max(np.abs(b.jac)))))
    return Check("flows.variational_vs_fd", rel <= 1e-5, {"max_rel_err": rel})


def check_semimetric_axioms(c: _Ctx) -> Check:
    K = CompactSample.from_points(c.k_points(16))
    flows = [LocalFlowNum(c.man, c.X, p, c.tol) for p in (c.p0, *c.pk[-2:])]
    f = VectorFieldExpr.scalar(c.cfg.test_functions[0], c.man.dim)
    out, ok = {}, True
    for spec in (SeminormSpec("m", 0), SeminormSpec("m", 1)):
        d = lambda a, b: flow_semimetric(flows[a], flows[b], c.t1, c.t0, K, f, spec)
        self_d = d(0, 0)
        sym = abs(d(0, 1) - d(1, 0))
        tri = d(0, 2) - (d(0, 1) + d(1, 2))
        out[f"m{spec.order}"] = {"self": self_d, "symmetry_err": sym, "triangle_excess": tri}
        ok &= self_d == 0.0 and sym <= 1e-14 and tri <= 1e-12
    return Check("flows.semimetric_axioms", bool(ok), out)


def check_diffeomorphism(c: _Ctx) -> Check:
    flow = LocalFlowNum(c.man, c.X, c.p0, c.tol)
    rep = diffeomorphism_check(flow, c.t1, c.t0, c.K)
    return Check("flows.injective_and_invertible", rep["ok"], rep)


CHECKS: list[tuple[str, Callable[[_Ctx], Check]]] = [
    ("expr.roundtrip", check_expr_roundtrip),
    ("expr.derivative_vs_fd", check_expr_derivative),
    ("geometry.metric_positive_definite", check_metric_pd),
    ("geometry.christoffel_symmetric", check_torsion_free),
    ("geometry.transport_preserves_norm", check_transport_isometry),
    ("jets.symmetric", check_jet_symmetry),
    ("seminorms.axioms", check_seminorm_axioms),
    ("seminorms.monotone_in_K", check_seminorm_monotone),
    ("flows.axioms", check_flow_axioms),
    ("flows.variational_vs_fd", check_variational_fd),
    ("flows.semimetric_axioms", check_semimetric_axioms),
    ("flows.injective_and_invertible", check_diffeomorphism),
]


def run_checks(cfg: ExperimentConfig, seed: int | None = None) -> list[Check]:
    ctx = _Ctx(cfg, cfg.seed if seed is None else seed)
    out = []
    for name, fn in CHECKS:
        try:
            out.append(fn(ctx))
        except Exception as err:  # noqa: BLE001 - failures are report content
            detail = {"error": f"{type(err).__name__}: {err}"}
            witness = getattr(err, "point", None)
            out.append(Check(name, False, detail, {"witness": witness.tolist()} if witness is not None else None))
    return out
