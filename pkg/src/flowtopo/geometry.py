"""Single-chart Riemannian data: metric, connection, transport, lengths."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expr
from .ode import solve

__all__ = [
    "ChartManifold",
    "MetricError",
    "ChartExitError",
    "PiecewiseCurve",
    "christoffel",
    "parallel_transport",
    "transport_segments",
    "curve_length",
    "chart_distance",
    "chart_distances",
    "DEFAULT_TRANSPORT_RTOL",
]

DEFAULT_TRANSPORT_RTOL = 1e-9
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_GL_PANELS = 4


class MetricError(ValueError):
    """Metric is not symmetric positive definite at a point."""

    def __init__(self, message: str, point: np.ndarray | None = None):
        super().__init__(message)
        self.point = point


class ChartExitError(ValueError):
    pass


def _sym_det(m: list[list[Expr]]) -> Expr:
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    out: Expr = ex.ZERO
    for j in range(n):
        if isinstance(m[0][j], ex.Const) and m[0][j].value == 0.0:
            continue
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        term = m[0][j] * _sym_det(minor)
        out = out + term if j % 2 == 0 else out - term
    return out


def _sym_inverse(m: list[list[Expr]]) -> list[list[Expr]]:
    n = len(m)
    if n == 1:
        return [[ex.ONE / m[0][0]]]
    det = _sym_det(m)
    inv = [[ex.ZERO] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            minor = [row[:j] + row[j + 1 :] for k, row in enumerate(m) if k != i]
            cof = _sym_det(minor)
            if (i + j) % 2:
                cof = -cof
            inv[j][i] = cof / det
    return inv


def _broadcast_eval(e: Expr, env: dict, n_points: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(ex.evaluate(e, env), dtype=float), (n_points,))


@dataclass(frozen=True)
class ChartManifold:
    """An open box in R^n with a metric and an affine connection.

    ``christoffel_table`` is ``None`` for the Levi-Civita connection of
    ``metric``; otherwise it holds user expressions ``table[k][i][j]`` for
    Gamma^k_{ij}.
    """

    dim: int
    box: tuple[tuple[float, float], ...]
    metric: tuple[tuple[Expr, ...], ...]
    christoffel_table: tuple[tuple[tuple[Expr, ...], ...], ...] | None = None
    torsion_free: bool = True

    def __post_init__(self):
        if len(self.box) != self.dim or len(self.metric) != self.dim:
            raise ValueError("box and metric must match the dimension")
        for lo, hi in self.box:
            if not lo < hi:
                raise ValueError(f"empty chart interval ({lo}, {hi})")
        for i in range(self.dim):
            if len(self.metric[i]) != self.dim:
                raise ValueError("metric must be square")
            for j in range(i):
                if self.metric[i][j] != self.metric[j][i]:
                    raise MetricError(f"metric not symmetric in entries ({i},{j})")
        if self.christoffel_table is not None and self.torsion_free:
            n = self.dim
            for k in range(n):
                for i in range(n):
                    for j in range(i):
                        if self.christoffel_table[k][i][j] != self.christoffel_table[k][j][i]:
                            raise ValueError(
                                f"torsion-free connection needs Gamma^{k + 1}_{{{i + 1}{j + 1}}} symmetric"
                            )

    @classmethod
    def build(
        cls,
        dim: int,
        box: Sequence[Sequence[float]],
        metric: Sequence[Sequence[str]] | None = None,
        christoffel: Sequence[Sequence[Sequence[str]]] | None = None,
        torsion_free: bool = True,
    ) -> "ChartManifold":
        """Construct from expression strings in ``x1..xn``; identity metric by default."""
        if metric is None:
            metric = [["1" if i == j else "0" for j in range(dim)] for i in range(dim)]
        g = tuple(tuple(ex.parse(s, dim) for s in row) for row in metric)
        table = None
        if christoffel is not None:
            table = tuple(
                tuple(tuple(ex.parse(s, dim) for s in row) for row in mat) for mat in christoffel
            )
        return cls(dim, tuple((float(a), float(b)) for a, b in box), g, table, torsion_free)

    @classmethod
    def euclidean(cls, dim: int, half_width: float = 10.0) -> "ChartManifold":
        return cls.build(dim, [(-half_width, half_width)] * dim)

    @property
    def connection_mode(self) -> str:
        return "levi_civita" if self.christoffel_table is None else "explicit"

    @cached_property
    def inverse_metric_exprs(self) -> tuple[tuple[Expr, ...], ...]:
        return tuple(tuple(r) for r in _sym_inverse([list(r) for r in self.metric]))

    @cached_property
    def gamma_exprs(self) -> tuple[tuple[tuple[Expr, ...], ...], ...]:
        """Gamma^k_{ij} as expressions, indexed ``[k][i][j]``."""
        if self.christoffel_table is not None:
            return self.christoffel_table
        n = self.dim
        g = self.metric
        ginv = self.inverse_metric_exprs
        xs = ex.state_vars(n)
        dg = [[[ex.differentiate(g[i][j], xs[l]) for l in range(n)] for j in range(n)] for i in range(n)]
        out = []
        for k in range(n):
            rows = []
            for i in range(n):
                row = []
                for j in range(n):
                    acc: Expr = ex.ZERO
                    for l in range(n):
                        inner = dg[j][l][i] + dg[i][l][j] - dg[i][j][l]
                        acc = acc + ginv[k][l] * inner
                    row.append(acc * 0.5)
                rows.append(tuple(row))
            out.append(tuple(rows))
        return tuple(out)

    @cached_property
    def is_flat_chart(self) -> bool:
        """True when every Christoffel symbol is identically zero."""
        return all(
            isinstance(e, ex.Const) and e.value == 0.0
            for mat in self.gamma_exprs
            for row in mat
            for e in row
        )

    @cached_property
    def has_constant_metric(self) -> bool:
        return all(isinstance(e, ex.Const) for row in self.metric for e in row)

    def env(self, points: np.ndarray) -> dict[str, np.ndarray]:
        points = np.atleast_2d(points)
        return {f"x{i + 1}": points[:, i] for i in range(self.dim)}

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Mask of points strictly inside the box shrunk by ``margin`` times each width."""
        points = np.atleast_2d(points)
        lo = np.array([a for a, _ in self.box])
        hi = np.array([b for _, b in self.box])
        w = hi - lo
        return np.all((points > lo + margin * w) & (points < hi - margin * w), axis=1)

    def require_inside(self, points: np.ndarray) -> None:
        points = np.atleast_2d(points)
        ok = self.contains(points)
        if not ok.all():
            bad = points[np.flatnonzero(~ok)[0]]
            raise ChartExitError(f"point {bad.tolist()} lies outside the chart box {self.box}")

    def metric_at(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        """Metric matrices, shape (N, n, n); Cholesky-checked for positive definiteness."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        N, n = points.shape[0], self.dim
        env = self.env(points)
        G = np.empty((N, n, n))
        for i in range(n):
            for j in range(i, n):
                G[:, i, j] = G[:, j, i] = _broadcast_eval(self.metric[i][j], env, N)
        if check:
            try:
                np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                eig = np.linalg.eigvalsh(G)[:, 0]
                w = int(np.argmin(eig))
                raise MetricError(
                    f"metric not positive definite at {points[w].tolist()} (min eigenvalue {eig[w]:.3e})",
                    point=points[w],
                ) from None
        return G

    def inverse_metric_at(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric_at(points))

    def christoffel_at(self, points: np.ndarray, check: bool = True) -> np.ndarray:
        """Christoffel symbols at each point, shape (N, n, n, n) indexed [p, k, i, j]."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        N, n = points.shape[0], self.dim
        if check and self.christoffel_table is None:
            self.metric_at(points)
        out = np.zeros((N, n, n, n))
        if self.is_flat_chart:
            return out
        env = self.env(points)
        for k in range(n):
            for i in range(n):
                for j in range(n):
                    e = self.gamma_exprs[k][i][j]
                    if not (isinstance(e, ex.Const) and e.value == 0.0):
                        out[:, k, i, j] = _broadcast_eval(e, env, N)
        return out


def christoffel(man: ChartManifold, x: Sequence[float]) -> np.ndarray:
    """Gamma^k_{ij} at ``x`` as an (n, n, n) array indexed [k, i, j]."""
    x = np.asarray(x, dtype=float)
    man.require_inside(x)
    return man.christoffel_at(x[None, :])[0]


@dataclass(frozen=True, eq=False)
class PiecewiseCurve:
    """Piecewise-linear chart curve on [0, 1]."""

    breaks: np.ndarray  # (q+1,), 0 = s_0 < ... < s_q = 1
    states: np.ndarray  # (q+1, n)

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        if b.ndim != 1 or len(b) != len(s) or len(b) < 1:
            raise ValueError("need one state per breakpoint")
        if len(b) > 1 and (b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0)):
            raise ValueError("breakpoints must increase from 0 to 1")
        object.__setattr__(self, "breaks", b)
        object.__setattr__(self, "states", s)

    @classmethod
    def through(cls, points: Sequence[Sequence[float]]) -> "PiecewiseCurve":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if len(pts) == 1:
            return cls(np.array([0.0, 1.0]), np.vstack([pts, pts]))
        return cls(np.linspace(0.0, 1.0, len(pts)), pts)

    @property
    def n_segments(self) -> int:
        return len(self.breaks) - 1

    def velocities(self) -> np.ndarray:
        return np.diff(self.states, axis=0) / np.diff(self.breaks)[:, None]

    def __call__(self, s: float | np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.stack(
            [np.interp(s, self.breaks, self.states[:, i]) for i in range(self.states.shape[1])], axis=-1
        )

    def split(self, s: float) -> tuple["PiecewiseCurve", "PiecewiseCurve"]:
        """Restrictions to [0, s] and [s, 1], each reparametrised onto [0, 1]."""
        if not 0.0 < s < 1.0:
            raise ValueError("split point must lie in (0, 1)")
        mid = self(s)
        left_b = [b for b in self.breaks if b < s] + [s]
        right_b = [s] + [b for b in self.breaks if b > s]
        left_s = np.vstack([self.states[self.breaks < s], mid])
        right_s = np.vstack([mid, self.states[self.breaks > s]])
        lb = np.array(left_b) / s
        rb = (np.array(right_b) - s) / (1.0 - s)
        lb[-1], rb[0], rb[-1] = 1.0, 0.0, 1.0
        return PiecewiseCurve(lb, left_s), PiecewiseCurve(rb, right_s)

    def refine(self, factor: int = 2) -> "PiecewiseCurve":
        """Same curve with every segment subdivided ``factor`` times."""
        b = [self.breaks[0]]
        for a, c in zip(self.breaks[:-1], self.breaks[1:]):
            b.extend(np.linspace(a, c, factor + 1)[1:])
        b = np.array(b)
        b[-1] = 1.0
        return PiecewiseCurve(b, self(b))


def _transport_rhs(man: ChartManifold, starts, ends, shape, n_cov: int, n_contra: int):
    vel_all = ends - starts

    def rhs(s, y, idx, seg):
        pts = starts[idx] + s * vel_all[idx]
        G = man.christoffel_at(pts, check=False)
        A = np.einsum("pkij,pi->pkj", G, vel_all[idx])  # A^k_j = Gamma^k_{ij} gamma'^i
        T = y.reshape((len(idx),) + shape)
        dT = np.zeros_like(T)
        nslots = n_cov + n_contra
        for slot in range(nslots):
            ax = slot + 1
            Tm = np.moveaxis(T, ax, -1)  # (..., a)
            if slot < n_cov:
                # covariant slot: + A^a_j T_{..a..}
                upd = np.einsum("p...a,paj->p...j", Tm, A)
            else:
                upd = -np.einsum("pka,p...a->p...k", A, Tm)
            dT += np.moveaxis(upd, -1, ax)
        return dT.reshape(len(idx), -1)

    return rhs


def transport_segments(
    man: ChartManifold,
    starts: np.ndarray,
    ends: np.ndarray,
    tensors: np.ndarray,
    n_cov: int = 0,
    n_contra: int = 1,
    rtol: float = DEFAULT_TRANSPORT_RTOL,
) -> np.ndarray:
    """Parallel transport a batch of tensors along straight chart segments.

    ``tensors`` has shape (N, n, ..., n) with ``n_cov`` covariant slots first
    and then ``n_contra`` contravariant slots.  Returns the transported
    tensors at the segment ends.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    tensors = np.asarray(tensors, dtype=float)
    man.require_inside(starts)
    man.require_inside(ends)
    if man.is_flat_chart or n_cov + n_contra == 0:
        return tensors.copy()
    N = starts.shape[0]
    shape = tensors.shape[1:]
    if man.christoffel_table is None:
        man.metric_at(np.vstack([starts, ends]))
    rhs = _transport_rhs(man, starts, ends, shape, n_cov, n_contra)
    scale = max(1.0, float(np.max(np.abs(tensors)))) if tensors.size else 1.0
    sol = solve(rhs, 0.0, 1.0, tensors.reshape(N, -1), rtol=rtol, atol=rtol * 1e-3 * scale)
    return sol.y.reshape(tensors.shape)


def parallel_transport(
    man: ChartManifold, curve: PiecewiseCurve, v0: Sequence[float], rtol: float = DEFAULT_TRANSPORT_RTOL
) -> np.ndarray:
    """Transport the tangent vector ``v0`` at ``curve(0)`` to ``curve(1)``."""
    v = np.asarray(v0, dtype=float)
    if v.shape != (man.dim,):
        raise ValueError(f"tangent vector must have dimension {man.dim}")
    man.require_inside(curve.states)
    for a, b in zip(curve.states[:-1], curve.states[1:]):
        if np.array_equal(a, b):
            continue
        v = transport_segments(man, a[None], b[None], v[None], 0, 1, rtol)[0]
    return v


def _segment_lengths(man: ChartManifold, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    d = ends - starts
    N = len(starts)
    if man.has_constant_metric:
        G = man.metric_at(starts[:1])[0]
        return np.sqrt(np.einsum("pi,ij,pj->p", d, G, d))
    total = np.zeros(N)
    edges = np.linspace(0.0, 1.0, _GL_PANELS + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        u = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
        w = 0.5 * (b - a) * _GL_WEIGHTS
        pts = (starts[:, None, :] + u[None, :, None] * d[:, None, :]).reshape(-1, man.dim)
        G = man.metric_at(pts).reshape(N, len(u), man.dim, man.dim)
        speed = np.sqrt(np.maximum(np.einsum("pi,puij,pj->pu", d, G, d), 0.0))
        total += speed @ w
    return total


def curve_length(man: ChartManifold, curve: PiecewiseCurve) -> float:
    """Metric length of a piecewise-linear curve (Gauss-Legendre per segment)."""
    man.require_inside(curve.states)
    if curve.n_segments == 0:
        return 0.0
    return float(np.sum(_segment_lengths(man, curve.states[:-1], curve.states[1:])))


def chart_distances(man: ChartManifold, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Lengths of the straight chart segments ``xs[i] -> ys[i]``.

    An upper bound for the geodesic distance; used as the distance throughout.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    man.require_inside(xs)
    man.require_inside(ys)
    return _segment_lengths(man, xs, ys)


def chart_distance(man: ChartManifold, x: Sequence[float], y: Sequence[float]) -> float:
    return float(chart_distances(man, np.asarray(x)[None], np.asarray(y)[None])[0])
