"""Symmetrised covariant derivatives and the weighted jet fibre metric.

The jet of a section at a point is stored as the list of its symmetrised
iterated covariant derivatives ``D^0, ..., D^m``; level ``j`` is an array of
shape ``(n,)*j + (fibre_dim,)``, symmetric in its first ``j`` axes.  The inner
product weights level ``j`` by ``1/j!`` in each argument, contracts form slots
with the inverse metric and vector fibres with the metric.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expr
from .geometry import ChartManifold

__all__ = [
    "FieldPiece",
    "VectorFieldExpr",
    "JetValue",
    "symmetrize",
    "covariant_derivative_exprs",
    "covariant_jet",
    "covariant_jets",
    "jet_inner_product",
    "jet_norm",
    "jet_norms",
    "jet_inner_products",
    "jet_level_terms",
    "fibre_metric",
    "M_MAX",
]

M_MAX = 6


@dataclass(frozen=True)
class FieldPiece:
    start: float
    stop: float
    components: tuple[Expr, ...]


@dataclass(frozen=True)
class VectorFieldExpr:
    """A (possibly piecewise-in-time) vector field or scalar function.

    Pieces partition the time axis; boundaries are the breakpoints the
    integrator steps to.  ``bundle`` is ``"tangent"`` (n components),
    ``"scalar"`` (one component) or ``"free"`` (any count, no jet calculus;
    used for real/imaginary halves of complexified fields).
    """

    pieces: tuple[FieldPiece, ...]
    n_state: int
    n_params: int = 0
    bundle: str = "tangent"

    def __post_init__(self):
        if self.bundle not in ("tangent", "scalar", "free"):
            raise ValueError(f"unknown bundle {self.bundle!r}")
        want = {"scalar": 1, "tangent": self.n_state}.get(self.bundle)
        for pc in self.pieces:
            if want is not None and len(pc.components) != want:
                raise ValueError(f"{self.bundle} field needs {want} components, got {len(pc.components)}")
        for a, b in zip(self.pieces[:-1], self.pieces[1:]):
            if a.stop != b.start:
                raise ValueError("field pieces must be contiguous")

    @classmethod
    def parse(
        cls,
        components: str | Sequence[str],
        n_state: int,
        n_params: int = 0,
        bundle: str | None = None,
    ) -> "VectorFieldExpr":
        if isinstance(components, str):
            components = [components]
        bundle = bundle or "tangent"
        comps = tuple(ex.parse(c, n_state, n_params) for c in components)
        return cls((FieldPiece(-math.inf, math.inf, comps),), n_state, n_params, bundle)

    @classmethod
    def scalar(cls, source: str, n_state: int, n_params: int = 0) -> "VectorFieldExpr":
        return cls.parse([source], n_state, n_params, bundle="scalar")

    @classmethod
    def piecewise(
        cls,
        pieces: Sequence[tuple[float, Sequence[str]]],
        n_state: int,
        n_params: int = 0,
        bundle: str = "tangent",
    ) -> "VectorFieldExpr":
        """``pieces`` is a list of ``(stop, components)``; the last stop may be ``inf``."""
        out = []
        start = -math.inf
        for i, (stop, comps) in enumerate(pieces):
            stop = math.inf if i == len(pieces) - 1 else float(stop)
            out.append(FieldPiece(start, stop, tuple(ex.parse(c, n_state, n_params) for c in comps)))
            start = stop
        return cls(tuple(out), n_state, n_params, bundle)

    @classmethod
    def from_exprs(cls, comps: Sequence[Expr], n_state: int, n_params: int = 0, bundle: str = "tangent"):
        return cls((FieldPiece(-math.inf, math.inf, tuple(comps)),), n_state, n_params, bundle)

    @property
    def fibre_dim(self) -> int:
        return 1 if self.bundle == "scalar" else self.n_state

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(pc.start for pc in self.pieces[1:])

    @property
    def is_time_dependent(self) -> bool:
        return len(self.pieces) > 1 or any(
            "t" in c.free_vars for pc in self.pieces for c in pc.components
        )

    def components_at(self, t: float) -> tuple[Expr, ...]:
        """Components of the piece active at ``t`` (pieces are right-continuous)."""
        for pc in self.pieces:
            if pc.start <= t < pc.stop:
                return pc.components
        return self.pieces[-1].components

    def components_on(self, a: float, b: float) -> tuple[Expr, ...]:
        """Components of the piece covering the open interval between ``a`` and ``b``."""
        return self.components_at(0.5 * (a + b)) if a != b else self.components_at(a)

    def _map(self, fn) -> "VectorFieldExpr":
        pieces = tuple(FieldPiece(pc.start, pc.stop, tuple(fn(c) for c in pc.components)) for pc in self.pieces)
        return VectorFieldExpr(pieces, self.n_state, self.n_params, self.bundle)

    def bind(self, p: Sequence[float]) -> "VectorFieldExpr":
        """Substitute numeric parameter values, leaving a parameter-free field."""
        p = tuple(float(v) for v in p)
        if len(p) != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {len(p)}")
        mapping = {f"p{i + 1}": v for i, v in enumerate(p)}
        out = self._map(lambda c: ex.substitute(c, mapping))
        return VectorFieldExpr(out.pieces, self.n_state, 0, self.bundle)

    def _combine(self, other: "VectorFieldExpr", op) -> "VectorFieldExpr":
        if (self.n_state, self.bundle) != (other.n_state, other.bundle):
            raise ValueError("fields live on different bundles")
        cuts = sorted(set(self.breakpoints) | set(other.breakpoints))
        edges = [-math.inf, *cuts, math.inf]
        pieces = []
        for a, b in zip(edges[:-1], edges[1:]):
            probe = (a + b) / 2 if math.isfinite(a) and math.isfinite(b) else (b - 1 if math.isfinite(b) else a + 1 if math.isfinite(a) else 0.0)
            ca, cb = self.components_at(probe), other.components_at(probe)
            pieces.append(FieldPiece(a, b, tuple(op(x, y) for x, y in zip(ca, cb))))
        return VectorFieldExpr(tuple(pieces), self.n_state, max(self.n_params, other.n_params), self.bundle)

    def __add__(self, other: "VectorFieldExpr") -> "VectorFieldExpr":
        return self._combine(other, lambda a, b: a + b)

    def __sub__(self, other: "VectorFieldExpr") -> "VectorFieldExpr":
        return self._combine(other, lambda a, b: a - b)

    def scale(self, c: float) -> "VectorFieldExpr":
        return self._map(lambda e: e * float(c))

    def __neg__(self) -> "VectorFieldExpr":
        return self._map(lambda e: -e)

    def env(self, t: float, p: Sequence[float], points: np.ndarray) -> dict:
        points = np.atleast_2d(points)
        env: dict = {"t": float(t)}
        env.update({f"x{i + 1}": points[:, i] for i in range(self.n_state)})
        env.update({f"p{i + 1}": float(v) for i, v in enumerate(p)})
        return env

    def evaluate(self, t: float, p: Sequence[float], points: np.ndarray, comps=None) -> np.ndarray:
        """Field values at ``points`` (N, n) -> (N, fibre_dim)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        comps = self.components_at(t) if comps is None else comps
        env = self.env(t, p, points)
        N = points.shape[0]
        return np.stack(
            [np.broadcast_to(np.asarray(ex.evaluate(c, env), dtype=float), (N,)) for c in comps], axis=1
        )


@dataclass(frozen=True, eq=False)
class JetValue:
    """Symmetrised covariant derivatives ``D^0..D^m`` at one base point."""

    order: int
    point: np.ndarray
    entries: tuple[np.ndarray, ...]
    bundle: str = "tangent"

    def table(self, j: int) -> dict[tuple[int, ...], np.ndarray]:
        """Level ``j`` keyed by sorted index tuples (one entry per symmetric component)."""
        n = len(self.point)
        return {
            idx: self.entries[j][idx]
            for idx in itertools.combinations_with_replacement(range(n), j)
        }

    def __sub__(self, other: "JetValue") -> "JetValue":
        return JetValue(self.order, self.point, tuple(a - b for a, b in zip(self.entries, other.entries)), self.bundle)

    def __add__(self, other: "JetValue") -> "JetValue":
        return JetValue(self.order, self.point, tuple(a + b for a, b in zip(self.entries, other.entries)), self.bundle)

    def __mul__(self, c: float) -> "JetValue":
        return JetValue(self.order, self.point, tuple(c * a for a in self.entries), self.bundle)

    __rmul__ = __mul__


def _sym_axes(T: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    axes = list(axes)
    if len(axes) <= 1:
        return T
    acc = np.zeros_like(T)
    perms = list(itertools.permutations(axes))
    for perm in perms:
        order = list(range(T.ndim))
        for src, dst in zip(axes, perm):
            order[src] = dst
        acc = acc + np.transpose(T, order)
    return acc / len(perms)


def symmetrize(T: np.ndarray, m: int | None = None) -> np.ndarray:
    """Average over all permutations of the first ``m`` axes (default: all axes)."""
    T = np.asarray(T, dtype=float)
    m = T.ndim if m is None else m
    if m > T.ndim:
        raise ValueError("more slots than tensor axes")
    return _sym_axes(T, range(m))


def _is_zero(e: Expr) -> bool:
    return isinstance(e, ex.Const) and e.value == 0.0


@lru_cache(maxsize=256)
def covariant_derivative_exprs(
    man: ChartManifold, comps: tuple[Expr, ...], bundle: str, m: int
) -> tuple[np.ndarray, ...]:
    """Expression arrays for ``nabla^j xi``, j = 0..m (unsymmetrised).

    Level ``j`` has shape ``(n,)*j + (fibre,)``; the newest derivative index is
    the first axis.
    """
    n = man.dim
    xs = ex.state_vars(n)
    fib = len(comps)
    levels = [np.empty((fib,), dtype=object)]
    for k in range(fib):
        levels[0][k] = comps[k]
    if man.is_flat_chart:
        for j in range(1, m + 1):
            arr = np.empty((n,) * j + (fib,), dtype=object)
            for idx in itertools.product(range(n), repeat=j):
                alpha = [0] * n
                for i in idx:
                    alpha[i] += 1
                for k in range(fib):
                    arr[idx + (k,)] = ex.partial(comps[k], alpha)
            levels.append(arr)
        return tuple(levels)
    G = man.gamma_exprs
    for j in range(1, m + 1):
        prev = levels[-1]
        arr = np.empty((n,) * j + (fib,), dtype=object)
        for idx in itertools.product(range(n), repeat=j):
            i, rest = idx[0], idx[1:]
            for k in range(fib):
                e = ex.differentiate(prev[rest + (k,)], xs[i])
                if bundle == "tangent":
                    for a in range(n):
                        g = G[k][i][a]
                        if not _is_zero(g):
                            e = e + g * prev[rest + (a,)]
                for s in range(len(rest)):
                    for a in range(n):
                        g = G[a][i][rest[s]]
                        if not _is_zero(g):
                            swapped = rest[:s] + (a,) + rest[s + 1 :]
                            e = e - g * prev[swapped + (k,)]
                arr[idx + (k,)] = e
        levels.append(arr)
    return tuple(levels)


def _eval_array(arr: np.ndarray, env: dict, N: int) -> np.ndarray:
    out = np.empty((N,) + arr.shape)
    cache: dict[Expr, np.ndarray] = {}
    for idx in np.ndindex(arr.shape):
        e = arr[idx]
        if e not in cache:
            cache[e] = np.broadcast_to(np.asarray(ex.evaluate(e, env), dtype=float), (N,))
        out[(slice(None),) + idx] = cache[e]
    return out


def covariant_jets(
    man: ChartManifold,
    xi: VectorFieldExpr,
    t: float,
    p: Sequence[float],
    points: np.ndarray,
    m: int,
    m_max: int = M_MAX,
) -> list[np.ndarray]:
    """Batched jets: level ``j`` has shape ``(N,) + (n,)*j + (fibre,)``."""
    if m > m_max:
        raise ValueError(f"jet order {m} exceeds m_max={m_max}")
    if m < 0:
        raise ValueError("jet order must be nonnegative")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    man.require_inside(points)
    if not man.is_flat_chart and man.christoffel_table is None:
        man.metric_at(points)
    levels = covariant_derivative_exprs(man, xi.components_at(t), xi.bundle, m)
    env = xi.env(t, p, points)
    N = points.shape[0]
    out = []
    for j, arr in enumerate(levels):
        vals = _eval_array(arr, env, N)
        out.append(_sym_axes(vals, range(1, j + 1)))
    return out


def covariant_jet(
    man: ChartManifold,
    xi: VectorFieldExpr,
    t: float,
    p: Sequence[float],
    x: Sequence[float],
    m: int,
    m_max: int = M_MAX,
) -> JetValue:
    x = np.asarray(x, dtype=float)
    levels = covariant_jets(man, xi, t, p, x[None, :], m, m_max)
    return JetValue(m, x, tuple(lv[0] for lv in levels), xi.bundle)


_LETTERS = "abcdefghijklm"
_UPPER = "ABCDEFGHIJKLM"


def jet_level_terms(
    a: Sequence[np.ndarray],
    b: Sequence[np.ndarray],
    ginv: np.ndarray,
    g_fibre: np.ndarray,
) -> list[np.ndarray]:
    """Per-level terms G((1/j!) a_j, (1/j!) b_j), each of shape (N,)."""
    if len(a) != len(b):
        raise ValueError("jets of different order")
    terms = []
    for j, (A, B) in enumerate(zip(a, b)):
        lo, up = _LETTERS[:j], _UPPER[:j]
        spec = f"P{lo}z,P{up}Z," + ",".join(f"P{lo[s]}{up[s]}" for s in range(j))
        spec += ("," if j else "") + "PzZ->P"
        ops = [A, B] + [ginv] * j + [g_fibre]
        terms.append(np.einsum(spec, *ops, optimize=True) / math.factorial(j) ** 2)
    return terms


def jet_inner_products(
    a: Sequence[np.ndarray],
    b: Sequence[np.ndarray],
    ginv: np.ndarray,
    g_fibre: np.ndarray,
) -> np.ndarray:
    """Batched weighted inner products; ``ginv``/``g_fibre`` have shape (N, ., .)."""
    terms = jet_level_terms(a, b, ginv, g_fibre)
    total = terms[0]
    for tm in terms[1:]:
        total = total + tm
    return np.asarray(total)


def fibre_metric(bundle: str, G: np.ndarray) -> np.ndarray:
    if bundle == "scalar":
        return np.ones((G.shape[0], 1, 1))
    return G


def jet_norms(
    man: ChartManifold, points: np.ndarray, entries: Sequence[np.ndarray], bundle: str
) -> np.ndarray:
    """Fibre norms of a batch of jets based at ``points``."""
    G = man.metric_at(points)
    ginv = np.linalg.inv(G)
    ip = jet_inner_products(entries, entries, ginv, fibre_metric(bundle, G))
    return np.sqrt(np.maximum(ip, 0.0))


def jet_inner_product(a: JetValue, b: JetValue, man: ChartManifold, x: Sequence[float] | None = None) -> float:
    if a.order != b.order:
        raise ValueError(f"order mismatch: {a.order} vs {b.order}")
    x = a.point if x is None else np.asarray(x, dtype=float)
    G = man.metric_at(x[None, :])
    ginv = np.linalg.inv(G)
    ea = [e[None] for e in a.entries]
    eb = [e[None] for e in b.entries]
    return float(jet_inner_products(ea, eb, ginv, fibre_metric(a.bundle, G))[0])


def jet_norm(a: JetValue, man: ChartManifold, x: Sequence[float] | None = None) -> float:
    return math.sqrt(max(jet_inner_product(a, a, man, x), 0.0))
