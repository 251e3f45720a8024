"""Numerical local flows of time- and parameter-dependent vector fields.

Time dependence is piecewise in time with declared breakpoints; the
integrator never steps across one.  A point belongs to the flow domain iff
its trajectory stays inside the chart box, so exits are results, not errors.
Spatial derivatives of the flow map (orders 1 and 2) come from the
variational equations integrated alongside the state.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import expr as ex
from .expr import Expr
from .geometry import ChartManifold, chart_distances
from .jets import VectorFieldExpr, fibre_metric, jet_inner_products, jet_level_terms
from .ode import OdeSolution, solve
from .seminorms import (
    CompactSample,
    SeminormSpec,
    TimeGrid,
    adaptive_quadrature,
    jet_dilatation,
)

__all__ = [
    "Trajectory",
    "FlowBatch",
    "LocalFlowNum",
    "FlowAxiomReport",
    "FlowDomainError",
    "ExprCurve",
    "OffsetCurve",
    "CompositeProbeReport",
    "integrate",
    "integrate_batch",
    "flow_axiom_check",
    "diffeomorphism_check",
    "flow_semimetric",
    "flow_ac_seminorm",
    "composite_integral",
    "composite_continuity_probe",
    "scalar_jets",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-9
MAX_VARIATIONAL_ORDER = 2


class FlowDomainError(RuntimeError):
    """A trajectory needed for the requested quantity left the chart box."""


# ---------------------------------------------------------------------------
# right hand sides
# ---------------------------------------------------------------------------


class _FieldRhs:
    """Vectorised ``X^p(t, x)`` plus its state derivatives for variational equations."""

    def __init__(self, X: VectorFieldExpr, p: Sequence[float], order: int):
        if X.bundle != "tangent":
            raise ValueError("can only integrate tangent vector fields")
        self.X = X
        self.p = tuple(float(v) for v in p)
        self.n = X.n_state
        self.order = order
        self._derivs: dict[int, tuple] = {}

    def derivs(self, comps: tuple[Expr, ...]):
        key = id(comps)
        if key not in self._derivs:
            xs = ex.state_vars(self.n)
            d1 = [[ex.differentiate(c, xs[j]) for j in range(self.n)] for c in comps]
            d2 = None
            if self.order >= 2:
                d2 = [[[ex.differentiate(d1[k][i], xs[j]) for j in range(self.n)] for i in range(self.n)] for k in range(self.n)]
            self._derivs[key] = (comps, d1, d2)
        return self._derivs[key]

    def __call__(self, seg_comps: Callable[[int], tuple[Expr, ...]]):
        n = self.n

        def rhs(t, y, idx, seg):
            comps = seg_comps(seg)
            x = y[:, :n]
            env = self.X.env(t, self.p, x)
            N = y.shape[0]
            ev = lambda e: np.broadcast_to(np.asarray(ex.evaluate(e, env), dtype=float), (N,))
            out = np.empty_like(y)
            for k in range(n):
                out[:, k] = ev(comps[k])
            if self.order == 0:
                return out
            _, d1, d2 = self.derivs(comps)
            A = np.empty((N, n, n))
            for k in range(n):
                for j in range(n):
                    A[:, k, j] = ev(d1[k][j])
            Jm = y[:, n : n + n * n].reshape(N, n, n)
            out[:, n : n + n * n] = np.einsum("pki,pia->pka", A, Jm).reshape(N, -1)
            if self.order >= 2:
                B = np.empty((N, n, n, n))
                for k in range(n):
                    for i in range(n):
                        for j in range(n):
                            B[:, k, i, j] = ev(d2[k][i][j])
                H = y[:, n + n * n :].reshape(N, n, n, n)
                dH = np.einsum("pki,piab->pkab", A, H) + np.einsum("pkij,pia,pjb->pkab", B, Jm, Jm)
                out[:, n + n * n :] = dH.reshape(N, -1)
            return out

        return rhs


def _segment_components(X: VectorFieldExpr):
    bps = sorted(X.breakpoints)
    edges = [-math.inf, *bps, math.inf]

    def comps(seg: int):
        a, b = edges[seg], edges[seg + 1]
        if math.isinf(a) and math.isinf(b):
            return X.pieces[0].components
        probe = b - 1.0 if math.isinf(a) else (a + 1.0 if math.isinf(b) else 0.5 * (a + b))
        return X.components_at(probe)

    return comps


def integrate_batch(
    man: ChartManifold,
    X: VectorFieldExpr,
    p: Sequence[float],
    t0: float,
    t1: float,
    X0: np.ndarray,
    tol: float,
    order: int = 0,
    dense: bool = False,
) -> OdeSolution:
    """Batched integration of the state plus variational equations up to ``order``.

    Columns of the result are the state, then the flattened Jacobian (order
    >= 1), then the flattened second derivatives (order 2).
    """
    if order > MAX_VARIATIONAL_ORDER:
        raise ValueError(f"variational order {order} not supported (max {MAX_VARIATIONAL_ORDER})")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    N, n = X0.shape
    if n != man.dim or X.n_state != n:
        raise ValueError("dimension mismatch between field, manifold and initial points")
    y0 = [X0]
    if order >= 1:
        y0.append(np.tile(np.eye(n).reshape(1, -1), (N, 1)))
    if order >= 2:
        y0.append(np.zeros((N, n**3)))
    y0 = np.hstack(y0)
    rhs = _FieldRhs(X, p, order)(_segment_components(X))
    inside = lambda y: man.contains(y[:, :n])
    return solve(
        rhs, t0, t1, y0, rtol=tol, atol=tol * 1e-3, breakpoints=X.breakpoints, inside=inside, dense=dense
    )


@dataclass
class Trajectory:
    """Integral curve with dense output; truncated at the chart boundary on exit."""

    t0: float
    t1: float
    times: np.ndarray
    states: np.ndarray
    exited: bool
    t_exit: float | None
    _sol: OdeSolution = field(repr=False)

    def __call__(self, t: float | np.ndarray) -> np.ndarray:
        """State(s) at ``t``; vectorised over an array of times."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((ts.size, self.states.shape[1]))
        lo, hi = sorted((self.t0, self.t_exit if self.exited else self.t1))
        for i, s in enumerate(ts):
            if not lo - 1e-12 <= s <= hi + 1e-12:
                raise ValueError(f"t={s} outside trajectory range [{lo}, {hi}]")
            s = min(max(s, lo), hi)
            if s == self.t0:
                out[i] = self.states[0]
            elif s == self.times[-1]:
                out[i] = self.states[-1]
            else:
                out[i] = self._sol.dense(s, 0)[: self.states.shape[1]]
        return out[0] if np.ndim(t) == 0 else out


def integrate(
    man: ChartManifold,
    X: VectorFieldExpr,
    p: Sequence[float],
    t0: float,
    t1: float,
    x0: Sequence[float],
    tol: float = DEFAULT_TOL,
) -> Trajectory:
    """Integral curve of ``X^p`` through ``x0`` at ``t0``, up to ``t1`` or box exit."""
    x0 = np.asarray(x0, dtype=float)
    man.require_inside(x0)
    sol = integrate_batch(man, X, p, t0, t1, x0[None, :], tol, dense=True)
    n = man.dim
    times = [t0] + [st.t + st.h for st in sol.steps]
    states = [x0] + [st(st.t + st.h)[0][:n] for st in sol.steps]
    if sol.exited[0]:
        times[-1] = float(sol.t_end[0])
        states[-1] = sol.y[0, :n]
    else:
        states[-1] = sol.y[0, :n]
    return Trajectory(
        t0,
        t1,
        np.array(times),
        np.array(states),
        bool(sol.exited[0]),
        float(sol.t_end[0]) if sol.exited[0] else None,
        sol,
    )


@dataclass
class FlowBatch:
    """Flow map values (and optional spatial derivatives) at a batch of points."""

    points: np.ndarray
    states: np.ndarray
    exited: np.ndarray
    jac: np.ndarray | None = None  # (N, n, n): d Phi^k / d x^a
    hess: np.ndarray | None = None  # (N, n, n, n): d^2 Phi^k / d x^a d x^b

    @property
    def all_defined(self) -> bool:
        return not bool(self.exited.any())


class LocalFlowNum:
    """Numerically realised local flow ``(t1, t0, x) -> Phi^{X^p}(t1, t0, x)``.

    Results are cached per (t1, t0, points, order); the cache is guarded by a
    lock so a flow can be shared between worker threads.
    """

    def __init__(
        self,
        man: ChartManifold,
        X: VectorFieldExpr,
        p: Sequence[float] = (),
        tol: float = DEFAULT_TOL,
        window: tuple[float, float] | None = None,
    ):
        self.man = man
        self.X = X
        self.p = tuple(float(v) for v in p)
        self.tol = tol
        self.window = window
        self._cache: dict[tuple, FlowBatch] = {}
        self._traj: dict[tuple, Trajectory] = {}
        self._lock = threading.Lock()

    def _check_window(self, *ts: float) -> None:
        if self.window is None:
            return
        lo, hi = self.window
        for t in ts:
            if not lo <= t <= hi:
                raise ValueError(f"time {t} outside the flow window {self.window}")

    def map(self, t1: float, t0: float, points: np.ndarray, order: int = 0) -> FlowBatch:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self._check_window(t0, t1)
        key = (float(t1), float(t0), points.shape, points.tobytes(), order)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        n = self.man.dim
        N = points.shape[0]
        inside = self.man.contains(points)
        if t1 == t0:
            # identity axiom holds exactly
            batch = FlowBatch(
                points,
                points.copy(),
                ~inside,
                np.tile(np.eye(n), (N, 1, 1)) if order >= 1 else None,
                np.zeros((N, n, n, n)) if order >= 2 else None,
            )
        else:
            sol = integrate_batch(self.man, self.X, self.p, t0, t1, points, self.tol, order)
            y = sol.y
            batch = FlowBatch(
                points,
                y[:, :n].copy(),
                sol.exited.copy(),
                y[:, n : n + n * n].reshape(N, n, n).copy() if order >= 1 else None,
                y[:, n + n * n :].reshape(N, n, n, n).copy() if order >= 2 else None,
            )
        with self._lock:
            self._cache[key] = batch
        return batch

    def __call__(self, t1: float, t0: float, x: Sequence[float]) -> np.ndarray:
        b = self.map(t1, t0, np.asarray(x, dtype=float)[None, :])
        if b.exited[0]:
            raise FlowDomainError(f"trajectory from {list(x)} at t0={t0} leaves the chart before t1={t1}")
        return b.states[0]

    def trajectory(self, t0: float, x0: Sequence[float], t_end: float) -> Trajectory:
        key = (float(t0), tuple(np.asarray(x0, dtype=float).tolist()), float(t_end))
        with self._lock:
            hit = self._traj.get(key)
        if hit is None:
            hit = integrate(self.man, self.X, self.p, t0, t_end, x0, self.tol)
            with self._lock:
                self._traj[key] = hit
        return hit


# ---------------------------------------------------------------------------
# flow axioms
# ---------------------------------------------------------------------------


@dataclass
class FlowAxiomReport:
    identity_residuals: list[float] = field(default_factory=list)
    cocycle_residuals: list[float] = field(default_factory=list)
    skipped: list[tuple] = field(default_factory=list)

    @property
    def max_identity(self) -> float:
        return max(self.identity_residuals, default=0.0)

    @property
    def max_cocycle(self) -> float:
        return max(self.cocycle_residuals, default=0.0)


def flow_axiom_check(flow: LocalFlowNum, samples: Sequence[tuple]) -> FlowAxiomReport:
    """Residuals of Phi(t0,t0,x) = x and Phi(t2,t1,Phi(t1,t0,x)) = Phi(t2,t0,x).

    ``samples`` are ``(t0, t1, t2, x)`` tuples.
    """
    rep = FlowAxiomReport()
    for t0, t1, t2, x in samples:
        x = np.asarray(x, dtype=float)
        try:
            ident = flow(t0, t0, x)
            rep.identity_residuals.append(float(np.max(np.abs(ident - x))))
            y = flow(t1, t0, x)
            lhs = flow(t2, t1, y)
            rhs = flow(t2, t0, x)
        except FlowDomainError:
            rep.skipped.append((t0, t1, t2, x.tolist()))
            continue
        rep.cocycle_residuals.append(float(np.max(np.abs(lhs - rhs))))
    return rep


def diffeomorphism_check(
    flow: LocalFlowNum, t1: float, t0: float, K: CompactSample, det_floor: float = 1e-8
) -> dict:
    """Sampled surrogate for the diffeomorphism axiom.

    Distinct sample points must have distinct images and the order-1
    variational matrix must stay invertible.
    """
    b = flow.map(t1, t0, K.points, order=1)
    ok = ~b.exited
    dets = np.linalg.det(b.jac[ok]) if ok.any() else np.empty(0)
    imgs = b.states[ok]
    min_sep = 0.0
    if len(imgs) >= 2:
        d, _ = cKDTree(imgs).query(imgs, k=2)
        min_sep = float(np.min(d[:, 1]))
    min_det = float(np.min(np.abs(dets))) if dets.size else 0.0
    return {
        "n_points": int(ok.sum()),
        "n_exited": int((~ok).sum()),
        "min_image_separation": min_sep,
        "min_abs_det": min_det,
        "ok": bool(min_det > det_floor and (len(imgs) < 2 or min_sep > 0.0)),
    }


# ---------------------------------------------------------------------------
# jets of scalar functions composed with a flow
# ---------------------------------------------------------------------------


def _expr_of(f: VectorFieldExpr | Expr, t: float) -> Expr:
    if isinstance(f, Expr):
        return f
    if f.bundle not in ("scalar", "tangent") or len(f.components_at(t)) != 1:
        raise ValueError("test function must be scalar")
    return f.components_at(t)[0]


def _composed_partials(g: Expr, t: float, p: Sequence[float], batch: FlowBatch, m: int, n: int):
    """Coordinate partials (orders <= m) of ``x -> g(Phi(x))``."""
    y = batch.states
    N = y.shape[0]
    env = {"t": float(t), **{f"x{i + 1}": y[:, i] for i in range(n)}, **{f"p{i + 1}": float(v) for i, v in enumerate(p)}}
    ev = lambda e: np.broadcast_to(np.asarray(ex.evaluate(e, env), dtype=float), (N,))
    xs = ex.state_vars(n)
    out = [ev(g)[:, None]]
    if m >= 1:
        dg = np.stack([ev(ex.differentiate(g, xs[i])) for i in range(n)], axis=1)  # (N, n)
        out.append(np.einsum("pi,pia->pa", dg, batch.jac)[:, :, None])
    if m >= 2:
        d2g = np.empty((N, n, n))
        for i in range(n):
            for j in range(n):
                d2g[:, i, j] = ev(ex.differentiate(ex.differentiate(g, xs[i]), xs[j]))
        second = np.einsum("pij,pia,pjb->pab", d2g, batch.jac, batch.jac) + np.einsum(
            "pi,piab->pab", dg, batch.hess
        )
        out.append(second[:, :, :, None])
    return out


def scalar_jets(man: ChartManifold, points: np.ndarray, partials: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Symmetrised covariant jets (order <= 2) of a scalar from its coordinate partials."""
    out = [partials[0]]
    if len(partials) >= 2:
        out.append(partials[1])
    if len(partials) >= 3:
        G = man.christoffel_at(points)
        corr = np.einsum("pkab,pk->pab", G, partials[1][:, :, 0])
        h = partials[2][:, :, :, 0] - corr
        h = 0.5 * (h + np.transpose(h, (0, 2, 1)))
        out.append(h[:, :, :, None])
    return out


def _scalar_seminorm_from_jets(
    man: ChartManifold, points: np.ndarray, jets: Sequence[np.ndarray], spec: SeminormSpec
) -> float:
    G = man.metric_at(points)
    ginv = np.linalg.inv(G)
    gfib = fibre_metric("scalar", G)
    kind = spec.kind
    if kind == "hol":
        return float(np.max(np.abs(jets[0][:, 0])))
    if kind == "omega":
        terms = jet_level_terms(list(jets), list(jets), ginv, gfib)
        best, coeff, acc = 0.0, 1.0, np.zeros(len(points))
        for m, term in enumerate(terms):
            coeff *= spec.weight(m)
            acc = acc + term
            best = max(best, coeff * float(np.sqrt(np.max(np.maximum(acc, 0.0)))))
        return best
    norms = np.sqrt(np.maximum(jet_inner_products(list(jets), list(jets), ginv, gfib), 0.0))
    cm = float(np.max(norms))
    if kind == "m+lip" and len(points) >= 2:
        return max(cm, jet_dilatation(man, points, list(jets), "scalar"))
    return cm


def _jet_order(spec: SeminormSpec) -> int:
    if spec.kind in ("hol",):
        return 0
    if spec.kind == "omega":
        m = spec.m_max
    else:
        m = spec.order
    if m > MAX_VARIATIONAL_ORDER:
        raise ValueError(
            f"flow jets of order {m} requested; variational equations support order <= {MAX_VARIATIONAL_ORDER}"
        )
    return m


def flow_semimetric(
    flow1: LocalFlowNum,
    flow2: LocalFlowNum,
    t1: float,
    t0: float,
    K: CompactSample,
    f: VectorFieldExpr | Expr,
    spec: SeminormSpec = SeminormSpec("m", 0),
) -> float:
    """Seminorm over ``K`` of ``f o Phi1 - f o Phi2`` at the fixed times (t1, t0).

    Order 0 is the sup of the difference; order m uses variational jets of the
    flow maps.
    """
    man = flow1.man
    n = man.dim
    m = _jet_order(spec)
    b1 = flow1.map(t1, t0, K.points, order=m)
    b2 = flow2.map(t1, t0, K.points, order=m)
    if not (b1.all_defined and b2.all_defined):
        raise FlowDomainError("flow leaves the chart box on K; semimetric undefined")
    g = _expr_of(f, t1)
    P1 = _composed_partials(g, t1, (), b1, m, n)
    P2 = _composed_partials(g, t1, (), b2, m, n)
    diff = [a - b for a, b in zip(P1, P2)]
    jets = scalar_jets(man, K.points, diff)
    return _scalar_seminorm_from_jets(man, K.points, jets, spec)


def _grid(interval: Sequence[float], n: int) -> np.ndarray:
    a, b = map(float, interval)
    return np.array([a]) if a == b else np.linspace(a, b, n)


def flow_ac_seminorm(
    flow: LocalFlowNum,
    K: CompactSample,
    I: Sequence[float],
    I_prime: Sequence[float],
    f: VectorFieldExpr | Expr,
    spec: SeminormSpec = SeminormSpec("m", 0),
    n_grid: int = 5,
    rtol: float = 1e-6,
    max_level: int = 8,
) -> tuple[float, float, float]:
    """max(sup part, integral part) for ``f o Phi``; returns (value, sup, integral).

    The sup part maximises the seminorm of ``f o Phi_{t1,t0}`` over a grid of
    (t1, t0) in I' x I.  The integral part integrates over I' the sup over t0
    of the seminorm of ``x -> <df, X_t>(Phi_{t,t0}(x))``.
    """
    man = flow.man
    n = man.dim
    m = _jet_order(spec)
    t0s = _grid(I, n_grid)
    t1s = _grid(I_prime, n_grid)

    def seminorm_of(g_expr, t, t0):
        b = flow.map(t, t0, K.points, order=m)
        if not b.all_defined:
            raise FlowDomainError(f"flow from t0={t0} leaves the chart before t={t}")
        P = _composed_partials(g_expr, t, flow.p, b, m, n)
        return _scalar_seminorm_from_jets(man, K.points, scalar_jets(man, K.points, P), spec)

    sup_part = 0.0
    for t1 in t1s:
        g = _expr_of(f, t1)
        for t0 in t0s:
            sup_part = max(sup_part, seminorm_of(g, float(t1), float(t0)))

    xs = ex.state_vars(n)

    def integrand(ts):
        vals = []
        for t in ts:
            g = _expr_of(f, float(t))
            comps = flow.X.components_at(float(t))
            h = ex.ZERO
            for i in range(n):
                h = h + ex.differentiate(g, xs[i]) * comps[i]
            vals.append(max(seminorm_of(h, float(t), float(t0)) for t0 in t0s))
        return np.array(vals)

    a, b = sorted(map(float, I_prime))
    grid = TimeGrid(a, b, 8, 0, tuple(flow.X.breakpoints))
    integral, _ = adaptive_quadrature(integrand, grid, rtol=rtol, max_level=max_level)
    return max(sup_part, integral), sup_part, integral


# ---------------------------------------------------------------------------
# composite sections along curves
# ---------------------------------------------------------------------------


class ExprCurve:
    """Curve ``t -> (c_1(t), ..., c_n(t))`` given by expressions in ``t``."""

    def __init__(self, components: Sequence[str | Expr], n: int | None = None):
        self.components = tuple(c if isinstance(c, Expr) else ex.parse(c, 0) for c in components)
        self.n = len(self.components)

    def __call__(self, t):
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.stack(
            [np.broadcast_to(np.asarray(ex.evaluate(c, {"t": ts}), dtype=float), ts.shape) for c in self.components],
            axis=-1,
        )
        return out[0] if np.ndim(t) == 0 else out


class OffsetCurve:
    """``gamma(t) + offset`` for a fixed chart vector ``offset``."""

    def __init__(self, base, offset: Sequence[float]):
        self.base = base
        self.offset = np.asarray(offset, dtype=float)

    def __call__(self, t):
        return self.base(t) + self.offset


def _curve_points(curve, ts: np.ndarray) -> np.ndarray:
    pts = np.asarray(curve(ts), dtype=float)
    return pts.reshape(len(ts), -1)


def composite_integral(
    f: VectorFieldExpr | Expr,
    curve: Callable,
    S: TimeGrid,
    p: Sequence[float] = (),
    rtol: float = 1e-6,
    max_level: int = 12,
) -> float:
    """Integral over S of ``t -> f(t, curve(t))`` with adaptive refinement."""
    breaks = tuple(S.breakpoints)
    if isinstance(f, VectorFieldExpr):
        breaks = tuple(sorted(set(breaks) | set(f.breakpoints)))
    grid = TimeGrid(S.a, S.b, S.order, S.level, breaks)

    def integrand(ts):
        pts = _curve_points(curve, ts)
        vals = np.empty(len(ts))
        for i, t in enumerate(ts):
            g = _expr_of(f, float(t))
            env = {"t": float(t), **{f"x{k + 1}": pts[i, k] for k in range(pts.shape[1])}}
            env.update({f"p{k + 1}": float(v) for k, v in enumerate(p)})
            vals[i] = float(ex.evaluate(g, env))
        return vals

    value, _ = adaptive_quadrature(integrand, grid, rtol=rtol, max_level=max_level)
    return value


@dataclass
class CompositeProbeReport:
    base_integral: float
    distances: list[float] = field(default_factory=list)
    integrals: list[float] = field(default_factory=list)
    differences: list[float] = field(default_factory=list)


def composite_continuity_probe(
    man: ChartManifold,
    f: VectorFieldExpr | Expr,
    curve: Callable,
    perturbations: Sequence[Callable],
    S: TimeGrid,
    n_distance_samples: int = 257,
    rtol: float = 1e-6,
) -> CompositeProbeReport:
    """Tabulate |integral along gamma_j - integral along gamma| against sup-distance."""
    base = composite_integral(f, curve, S, rtol=rtol)
    rep = CompositeProbeReport(base)
    ts = np.linspace(S.a, S.b, n_distance_samples)
    g0 = _curve_points(curve, ts)
    for pert in perturbations:
        gj = _curve_points(pert, ts)
        rep.distances.append(float(np.max(chart_distances(man, gj, g0))))
        val = composite_integral(f, pert, S, rtol=rtol)
        rep.integrals.append(val)
        rep.differences.append(abs(val - base))
    return rep
