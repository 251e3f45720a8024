"""Seminorm families over sampled compact sets.

Every sup over a compact set is a max over a finite :class:`CompactSample`;
the sample mesh is recorded so results can be stated at a fixed resolution.
Sampling under-approximates the true sup.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ChartManifold, chart_distances, transport_segments
from .jets import (
    M_MAX,
    FieldPiece,
    VectorFieldExpr,
    covariant_jets,
    fibre_metric,
    jet_inner_products,
    jet_level_terms,
    jet_norms,
)

__all__ = [
    "CompactSample",
    "SeminormSpec",
    "TimeGrid",
    "LocalDilatation",
    "QuadratureError",
    "seminorm_cm",
    "seminorm_inf",
    "seminorm_lip",
    "seminorm_omega_truncated",
    "seminorm_hol",
    "seminorm",
    "sectional_dilatation",
    "local_dilatation",
    "time_integrated_seminorm",
    "parameter_gap",
    "adaptive_quadrature",
    "jet_dilatation",
    "split_complex",
]

KINDS = ("m", "m+lip", "inf", "omega", "hol")


class QuadratureError(RuntimeError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(f"{message}; level trace: {trace}")
        self.trace = trace


@dataclass(frozen=True, eq=False)
class CompactSample:
    """Finite stand-in for a compact set: points plus the max nearest-neighbour gap."""

    points: np.ndarray
    mesh: float
    descriptor: str = "points"

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]], descriptor: str = "points") -> "CompactSample":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("compact sample must be nonempty")
        if pts.shape[0] == 1:
            mesh = 0.0
        else:
            d, _ = cKDTree(pts).query(pts, k=2)
            mesh = float(np.max(d[:, 1]))
        return cls(pts, mesh, descriptor)

    @classmethod
    def grid(cls, box: Sequence[Sequence[float]], resolution: int | Sequence[int]) -> "CompactSample":
        box = [tuple(map(float, b)) for b in box]
        if isinstance(resolution, int):
            resolution = [resolution] * len(box)
        if any(r < 2 for r in resolution):
            raise ValueError("grid resolution must be at least 2 per axis")
        axes = [np.linspace(a, b, r) for (a, b), r in zip(box, resolution)]
        pts = np.array(list(itertools.product(*axes)))
        return cls.from_points(pts, f"grid {box} x {list(resolution)}")

    @classmethod
    def ball(cls, center: Sequence[float], radius: float, resolution: int = 33) -> "CompactSample":
        """Grid points of the closed chart ball ``|y - center| <= radius``."""
        c = np.asarray(center, dtype=float)
        axes = [np.linspace(ci - radius, ci + radius, resolution) for ci in c]
        pts = np.array(list(itertools.product(*axes)))
        pts = pts[np.linalg.norm(pts - c, axis=1) <= radius * (1 + 1e-12)]
        return cls.from_points(pts, f"ball center={c.tolist()} r={radius} res={resolution}")

    @classmethod
    def polydisc(cls, n: int, radius: float = 1.0, n_radial: int = 9, n_angular: int = 16) -> "CompactSample":
        """Closed polydisc in C^n sampled as R^{2n} with (Re z1, Im z1, ...) ordering."""
        disc = [(0.0, 0.0)]
        for r in np.linspace(0.0, radius, n_radial)[1:]:
            for th in np.linspace(0.0, 2 * np.pi, n_angular, endpoint=False):
                disc.append((r * math.cos(th), r * math.sin(th)))
        pts = [sum(combo, ()) for combo in itertools.product(disc, repeat=n)]
        return cls.from_points(pts, f"polydisc n={n} r={radius}")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def union(self, other: "CompactSample") -> "CompactSample":
        return CompactSample.from_points(np.vstack([self.points, other.points]), "union")


@dataclass(frozen=True)
class SeminormSpec:
    """Which seminorm to apply: class, jet order, weights and truncation order."""

    kind: str = "m"
    order: int = 0
    weights: tuple[float, ...] | None = None
    m_max: int = M_MAX

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown seminorm class {self.kind!r}; expected one of {KINDS}")
        if self.order < 0 or self.order > self.m_max:
            raise ValueError(f"order {self.order} outside 0..m_max={self.m_max}")
        if self.weights is not None and any(w <= 0 for w in self.weights):
            raise ValueError("omega weights must be strictly positive")

    def weight(self, j: int) -> float:
        if self.weights is None:
            return 1.0 / (j + 1)
        if j >= len(self.weights):
            raise ValueError(f"weight sequence too short for level {j}")
        return float(self.weights[j])


@dataclass(frozen=True)
class TimeGrid:
    """Composite Gauss-Legendre rule on [a, b] with ``2**level`` panels per piece."""

    a: float
    b: float
    order: int = 8
    level: int = 0
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.b >= self.a:
            raise ValueError("time interval must satisfy a <= b")

    @property
    def length(self) -> float:
        return self.b - self.a

    def refined(self, level: int | None = None) -> "TimeGrid":
        return TimeGrid(self.a, self.b, self.order, self.level + 1 if level is None else level, self.breakpoints)

    def nodes_weights(self) -> tuple[np.ndarray, np.ndarray]:
        if self.a == self.b:
            return np.empty(0), np.empty(0)
        x, w = np.polynomial.legendre.leggauss(self.order)
        cuts = [self.a, *sorted(c for c in self.breakpoints if self.a < c < self.b), self.b]
        nodes, weights = [], []
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            edges = np.linspace(lo, hi, 2**self.level + 1)
            for pa, pb in zip(edges[:-1], edges[1:]):
                nodes.append(0.5 * (pb - pa) * x + 0.5 * (pa + pb))
                weights.append(0.5 * (pb - pa) * w)
        return np.concatenate(nodes), np.concatenate(weights)

    @property
    def nodes(self) -> np.ndarray:
        return self.nodes_weights()[0]

    @property
    def weights(self) -> np.ndarray:
        return self.nodes_weights()[1]


def _pairwise_sum(values: np.ndarray) -> float:
    # deterministic reduction order
    v = np.asarray(values, dtype=float)
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0]) if v.size else 0.0


def adaptive_quadrature(
    integrand, grid: TimeGrid, rtol: float = 1e-6, atol: float = 1e-14, max_level: int = 12
) -> tuple[float, list[float]]:
    """Refine ``grid`` until successive levels agree to ``rtol``.

    ``integrand(ts) -> values`` is called on node arrays.  Returns the value
    and the per-level trace.
    """
    trace: list[float] = []
    g = grid
    prev = None
    while True:
        nodes, weights = g.nodes_weights()
        if nodes.size == 0:
            return 0.0, [0.0]
        vals = np.asarray(integrand(nodes), dtype=float)
        cur = _pairwise_sum(vals * weights)
        trace.append(cur)
        if prev is not None and abs(cur - prev) <= rtol * abs(cur) + atol:
            return cur, trace
        if g.level >= max_level:
            raise QuadratureError("time quadrature did not converge", trace)
        prev = cur
        g = g.refined()


# ---------------------------------------------------------------------------
# pointwise seminorms
# ---------------------------------------------------------------------------


def _jets(man, xi, t, p, K, m):
    return covariant_jets(man, xi, t, p, K.points, m)


def seminorm_cm(
    man: ChartManifold, xi: VectorFieldExpr, t: float, p: Sequence[float], K: CompactSample, m: int
) -> float:
    """Max over ``K`` of the weighted m-jet norm."""
    entries = _jets(man, xi, t, p, K, m)
    return float(np.max(jet_norms(man, K.points, entries, xi.bundle)))


def seminorm_inf(man, xi, t, p, K, m) -> float:
    """The m-th member of the smooth family; same computation as :func:`seminorm_cm`."""
    return seminorm_cm(man, xi, t, p, K, m)


def _transport_jet_back(man, ys, xs, level_entries, fibre_contra: int) -> list[np.ndarray]:
    out = []
    for j, E in enumerate(level_entries):
        out.append(transport_segments(man, ys, xs, E, n_cov=j, n_contra=fibre_contra))
    return out


def jet_dilatation(
    man: ChartManifold,
    points: np.ndarray,
    entries: Sequence[np.ndarray],
    bundle: str,
    chunk: int = 4096,
) -> float:
    """Max over ordered pairs of transported jet differences over chart distance."""
    points = np.atleast_2d(points)
    N = points.shape[0]
    if N < 2:
        raise ValueError("dilatation needs at least two sample points")
    I, J = np.nonzero(~np.eye(N, dtype=bool))
    flat = man.is_flat_chart
    if flat:
        # transport is the identity: the ratio is symmetric, keep i < j only
        keep = I < J
        I, J = I[keep], J[keep]
    best = 0.0
    fibre_contra = 0 if bundle == "scalar" else 1
    G_all = man.metric_at(points)
    ginv_all = np.linalg.inv(G_all)
    for s in range(0, len(I), chunk):
        i, j = I[s : s + chunk], J[s : s + chunk]
        xs, ys = points[i], points[j]
        dist = chart_distances(man, xs, ys)
        ok = dist > 0
        if not ok.any():
            continue
        i, j, xs, ys, dist = i[ok], j[ok], xs[ok], ys[ok], dist[ok]
        at_y = [E[j] for E in entries]
        if not flat:
            at_y = _transport_jet_back(man, ys, xs, at_y, fibre_contra)
        diff = [a - E[i] for a, E in zip(at_y, entries)]
        gfib = fibre_metric(bundle, G_all[i])
        norms = np.sqrt(np.maximum(jet_inner_products(diff, diff, ginv_all[i], gfib), 0.0))
        best = max(best, float(np.max(norms / dist)))
    return best


def sectional_dilatation(
    man: ChartManifold, xi: VectorFieldExpr, t: float, p: Sequence[float], K: CompactSample, m: int = 0
) -> float:
    """Pairwise K-sectional dilatation of the m-jet field over straight chart segments."""
    entries = _jets(man, xi, t, p, K, m)
    return jet_dilatation(man, K.points, entries, xi.bundle)


@dataclass
class LocalDilatation:
    value: float
    radii: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)


def local_dilatation(
    man: ChartManifold,
    xi: VectorFieldExpr,
    t: float,
    p: Sequence[float],
    x: Sequence[float],
    r0: float = 0.64,
    levels: int = 6,
    resolution: int = 33,
    m: int = 0,
) -> LocalDilatation:
    """Sectional dilatation on shrinking balls ``r_k = r0 * 2**-k``; returns the minimum."""
    x = np.asarray(x, dtype=float)
    man.require_inside(x)
    r = r0
    while True:
        ball = CompactSample.ball(x, r, resolution)
        if man.contains(ball.points).all():
            break
        r *= 0.5
        if r < 1e-12:
            raise ValueError("cannot fit a ball inside the chart box")
    out = LocalDilatation(math.inf)
    for k in range(levels):
        rk = r * 2.0**-k
        ball = CompactSample.ball(x, rk, resolution)
        val = sectional_dilatation(man, xi, t, p, ball, m)
        out.radii.append(rk)
        out.values.append(val)
    out.value = min(out.values)
    return out


def seminorm_lip(man, xi, t, p, K, m) -> float:
    """max(dilatation of the m-jet over K, sup m-jet norm)."""
    entries = _jets(man, xi, t, p, K, m)
    cm = float(np.max(jet_norms(man, K.points, entries, xi.bundle)))
    if len(K) < 2:
        return cm
    return max(jet_dilatation(man, K.points, entries, xi.bundle), cm)


def seminorm_omega_truncated(
    man, xi, t, p, K, weights: Sequence[float] | None = None, m_max: int = M_MAX
) -> float:
    """max over m <= m_max of (a_0 ... a_m) * sup_K |j_m xi|; a truncation of the full sup."""
    spec = SeminormSpec("omega", 0, tuple(weights) if weights is not None else None, m_max)
    entries = _jets(man, xi, t, p, K, m_max)
    G = man.metric_at(K.points)
    terms = jet_level_terms(entries, entries, np.linalg.inv(G), fibre_metric(xi.bundle, G))
    best = 0.0
    coeff = 1.0
    acc = np.zeros(len(K))
    for m in range(m_max + 1):
        coeff *= spec.weight(m)
        acc = acc + terms[m]
        best = max(best, coeff * float(np.sqrt(np.max(np.maximum(acc, 0.0)))))
    return best


def seminorm_hol(
    xi_re: VectorFieldExpr,
    xi_im: VectorFieldExpr,
    K_complex: CompactSample,
    t: float = 0.0,
    p: Sequence[float] = (),
) -> float:
    """Sup of the Hermitian norm sqrt(sum |xi^k(z)|^2) over complex samples."""
    re = xi_re.evaluate(t, p, K_complex.points)
    im = xi_im.evaluate(t, p, K_complex.points)
    return float(np.max(np.sqrt(np.sum(re**2 + im**2, axis=1))))


def split_complex(xi: VectorFieldExpr) -> tuple[VectorFieldExpr, VectorFieldExpr]:
    """Real and imaginary parts of a field whose components interleave (Re, Im)."""
    re = tuple(FieldPiece(pc.start, pc.stop, pc.components[0::2]) for pc in xi.pieces)
    im = tuple(FieldPiece(pc.start, pc.stop, pc.components[1::2]) for pc in xi.pieces)
    return (
        VectorFieldExpr(re, xi.n_state, xi.n_params, "free"),
        VectorFieldExpr(im, xi.n_state, xi.n_params, "free"),
    )


def seminorm(
    man: ChartManifold,
    xi: VectorFieldExpr,
    t: float,
    p: Sequence[float],
    K: CompactSample,
    spec: SeminormSpec,
) -> float:
    """Dispatch on ``spec.kind``.  For ``hol`` the field's components are
    interleaved real/imaginary parts over the 2n-real chart."""
    if spec.kind == "m":
        return seminorm_cm(man, xi, t, p, K, spec.order)
    if spec.kind == "inf":
        return seminorm_inf(man, xi, t, p, K, spec.order)
    if spec.kind == "m+lip":
        return seminorm_lip(man, xi, t, p, K, spec.order)
    if spec.kind == "omega":
        return seminorm_omega_truncated(man, xi, t, p, K, spec.weights, spec.m_max)
    re, im = split_complex(xi)
    return seminorm_hol(re, im, K, t, p)


def time_integrated_seminorm(
    man: ChartManifold,
    X: VectorFieldExpr,
    p: Sequence[float],
    K: CompactSample,
    S: TimeGrid,
    spec: SeminormSpec,
    rtol: float = 1e-6,
    max_level: int = 12,
) -> float:
    """Integral over S of t -> seminorm(X_t), refined until two levels agree."""
    grid = TimeGrid(S.a, S.b, S.order, S.level, tuple(sorted(set(S.breakpoints) | set(X.breakpoints))))
    if not X.is_time_dependent:
        return S.length * seminorm(man, X, S.a, p, K, spec)

    def integrand(ts):
        return np.array([seminorm(man, X, float(t), p, K, spec) for t in ts])

    value, _ = adaptive_quadrature(integrand, grid, rtol=rtol, max_level=max_level)
    return value


def parameter_gap(
    man: ChartManifold,
    X: VectorFieldExpr,
    p: Sequence[float],
    p0: Sequence[float],
    K: CompactSample,
    S: TimeGrid,
    spec: SeminormSpec,
    rtol: float = 1e-6,
) -> float:
    """Time-integrated seminorm of the difference field X^p - X^{p0}."""
    diff = X.bind(p) - X.bind(p0)
    return time_integrated_seminorm(man, diff, (), K, S, spec, rtol)
