"""Batched Dormand-Prince 5(4) integrator with dense output.

All trajectories in a batch share one step-size sequence (the error norm is
the max over the batch), which keeps results deterministic and lets the right
hand side be evaluated once per stage for every point.  Steps never cross a
declared breakpoint.  Points that leave the admissible region are frozen at
the (bisected) exit time and removed from the active set.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Dormand & Prince (1980) coefficients
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between 5th and embedded 4th order weights
_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)
# continuous extension: y(t + s h) = y + h * sum_i K_i * (P[i] @ [s, s^2, s^3, s^4])
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

Rhs = Callable[[float, np.ndarray, np.ndarray, int], np.ndarray]


class StepSizeUnderflow(RuntimeError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow (h={h:.3e}) at t={t!r}; problem may be stiff")
        self.t = t
        self.h = h


@dataclass
class DenseStep:
    t: float
    h: float
    index: np.ndarray  # batch indices active during this step
    y: np.ndarray  # (len(index), d)
    K: np.ndarray  # (7, len(index), d)

    def __call__(self, t: float | np.ndarray) -> np.ndarray:
        s = (np.asarray(t, dtype=float) - self.t) / self.h
        powers = np.stack([s, s**2, s**3, s**4], axis=-1)  # (..., 4)
        Q = np.einsum("kbd,kp->pbd", self.K, _P)  # (4, b, d)
        return self.y + self.h * np.einsum("...p,pbd->...bd", powers, Q)


@dataclass
class OdeSolution:
    t0: float
    t1: float
    y: np.ndarray  # (N, d) final states (state at exit for exited points)
    t_end: np.ndarray  # (N,) t1, or the exit time
    exited: np.ndarray  # (N,) bool
    n_steps: int = 0
    n_rejected: int = 0
    steps: list[DenseStep] = field(default_factory=list)

    def dense(self, t: float, i: int = 0) -> np.ndarray:
        """Interpolated state of batch member ``i`` at ``t``."""
        if t == self.t0:
            return self.steps[0].y[0] if self.steps else self.y[i]
        for st in self.steps:
            lo, hi = sorted((st.t, st.t + st.h))
            if lo <= t <= hi:
                pos = np.searchsorted(st.index, i)
                if pos < len(st.index) and st.index[pos] == i:
                    return st(t)[pos]
        if t == self.t1 and not self.exited[i]:
            return self.y[i]
        raise ValueError(f"t={t} outside the integrated range of member {i}")


def _error_norm(err, y, ynew, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(ynew))
    per_point = np.sqrt(np.mean((err / scale) ** 2, axis=1))
    return float(np.max(per_point)) if per_point.size else 0.0


def _initial_step(rhs, t, y, f0, direction, rtol, atol, idx, seg, span) -> float:
    scale = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y + direction * h0 * f0
    f1 = rhs(t + direction * h0, y1, idx, seg)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def solve(
    rhs: Rhs,
    t0: float,
    t1: float,
    y0: np.ndarray,
    rtol: float = 1e-9,
    atol: float = 1e-12,
    breakpoints: Sequence[float] = (),
    inside: Callable[[np.ndarray], np.ndarray] | None = None,
    dense: bool = False,
    max_steps: int = 200_000,
) -> OdeSolution:
    """Integrate ``y' = rhs(t, y, idx, seg)`` for a batch ``y0`` of shape (N, d).

    ``idx`` holds the batch indices of the rows passed in ``y``; ``seg`` is the
    index of the breakpoint-delimited segment being integrated, so piecewise
    right hand sides can pick the correct piece even at segment ends.
    ``inside(y) -> bool mask`` marks admissible states.
    """
    y0 = np.array(y0, dtype=float)
    if y0.ndim != 2:
        raise ValueError("y0 must have shape (N, d)")
    N = y0.shape[0]
    sol = OdeSolution(
        t0=t0, t1=t1, y=y0.copy(), t_end=np.full(N, float(t1)), exited=np.zeros(N, dtype=bool)
    )
    if inside is not None:
        bad = ~inside(y0)
        sol.exited[bad] = True
        sol.t_end[bad] = t0
    if t1 == t0 or N == 0:
        return sol

    direction = 1.0 if t1 > t0 else -1.0
    lo, hi = sorted((t0, t1))
    bps = sorted(b for b in breakpoints if lo < b < hi)
    if direction < 0:
        bps = bps[::-1]
    nodes = [t0, *bps, t1]

    # segment index in the forward breakpoint ordering
    all_bps = sorted(breakpoints)

    def seg_index(a: float, b: float) -> int:
        mid = 0.5 * (a + b)
        return int(np.searchsorted(all_bps, mid, side="right"))

    active = np.flatnonzero(~sol.exited)
    y = y0[active].copy()
    h_prev = None
    steps_total = 0

    for a, b in zip(nodes[:-1], nodes[1:]):
        if active.size == 0:
            break
        seg = seg_index(a, b)
        t = a
        span = abs(b - a)
        f = rhs(t, y, active, seg)
        h = h_prev if h_prev is not None else _initial_step(
            rhs, t, y, f, direction, rtol, atol, active, seg, span
        )
        while direction * (b - t) > 0 and active.size:
            if steps_total >= max_steps:
                raise RuntimeError(f"maximum number of steps ({max_steps}) exceeded at t={t!r}")
            remaining = abs(b - t)
            last = h >= remaining * (1 - 1e-12)
            h_use = remaining if last else h
            if h_use < 1e-14 * max(1.0, abs(t)):
                raise StepSizeUnderflow(t, h_use)
            hs = direction * h_use
            K = np.empty((7,) + y.shape)
            K[0] = f
            for i in range(1, 7):
                dy = sum(_A[i][j] * K[j] for j in range(i) if _A[i][j] != 0.0)
                K[i] = rhs(t + _C[i] * hs, y + hs * dy, active, seg)
            ynew = y + hs * np.tensordot(_B[:6], K[:6], axes=1)
            err = hs * np.tensordot(_E, K, axes=1)
            en = _error_norm(err, y, ynew, rtol, atol)
            if en <= 1.0:
                tnew = b if last else t + hs
                step = DenseStep(t=t, h=hs, index=active.copy(), y=y.copy(), K=K)
                if dense:
                    sol.steps.append(step)
                sol.n_steps += 1
                steps_total += 1
                factor = 5.0 if en == 0 else min(5.0, max(0.2, 0.9 * en ** (-0.2)))
                f_next = K[6]
                if inside is not None:
                    ok = inside(ynew)
                    if not ok.all():
                        gone = np.flatnonzero(~ok)
                        for g in gone:
                            sol.t_end[active[g]], sol.y[active[g]] = _bisect_exit(
                                step, g, inside, t, tnew
                            )
                            sol.exited[active[g]] = True
                        keep = ok
                        active = active[keep]
                        ynew = ynew[keep]
                        f_next = f_next[keep]
                t = tnew
                y = ynew
                f = f_next
                if not last:
                    h = h_use * factor
                    h_prev = h
            else:
                sol.n_rejected += 1
                h = h_use * max(0.2, 0.9 * en ** (-0.2))
        sol.y[active] = y
    return sol


def _bisect_exit(step: DenseStep, g: int, inside, ta: float, tb: float, iters: int = 60):
    """Locate the first time member ``g`` of ``step`` leaves the region."""
    a, b = ta, tb
    ya = step.y[g]
    yb = step(tb)[g]
    for _ in range(iters):
        m = 0.5 * (a + b)
        ym = step(m)[g]
        if inside(ym[None, :])[0]:
            a, ya = m, ym
        else:
            b, yb = m, ym
        if a == m and b == m:
            break
    return b, yb
