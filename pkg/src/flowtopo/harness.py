"""Config-driven experiments and their CSV/JSON reports.

Parameter continuity is probed along an explicit sequence p_k -> p0, which
is the checkable stand-in for an arbitrary parameter space.  Rows are
computed in parallel; assembly and writing are ordered and single threaded,
and floats are written with ``repr`` so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .flows import (
    ExprCurve,
    FlowDomainError,
    LocalFlowNum,
    OffsetCurve,
    composite_continuity_probe,
    flow_semimetric,
)
from .invariants import run_checks
from .seminorms import SeminormSpec, TimeGrid, parameter_gap

PASS, FAIL = "PASS", "FAIL"
NON_GUARANTEED = "NON-GUARANTEED"
ROW_OK, ROW_UNDEFINED = "OK", "WELL-DEFINEDNESS-FAIL"
MONOTONE_SLACK = 1e-12
TAIL = 3

CONTINUITY_COLUMNS = ["k", "gap_eq24", "semimetric_nu0", "semimetric_num", "f_index", "param_dist", "status"]


def eventually_small(values: Sequence[float], eps: float, tail: int = TAIL, slack: float = MONOTONE_SLACK) -> bool:
    """Final value below ``eps`` and each of the last ``tail`` entries <= its predecessor + slack."""
    vals = [float(v) for v in values]
    if not vals or not all(math.isfinite(v) for v in vals):
        return False
    if vals[-1] >= eps:
        return False
    last = vals[-(tail + 1):]
    return all(b <= a + slack for a, b in zip(last[:-1], last[1:]))


def _map_rows(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# continuity
# ---------------------------------------------------------------------------


@dataclass
class ContinuityRow:
    k: int
    f_index: int
    param_dist: float
    gap_eq24: float
    semimetric_nu0: float
    semimetric_num: float
    status: str = ROW_OK

    def values(self) -> list:
        return [self.k, self.gap_eq24, self.semimetric_nu0, self.semimetric_num, self.f_index, self.param_dist, self.status]


@dataclass
class ContinuityReport:
    rows: list[ContinuityRow]
    spec: SeminormSpec
    accept: float
    verdicts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        flags = [v for per_f in self.verdicts.values() for v in per_f.values()]
        return PASS if all(v in (PASS, NON_GUARANTEED) for v in flags) else FAIL


def _flow_spec(spec: SeminormSpec) -> SeminormSpec:
    # the Hermitian sup of a real flow difference is its ordinary sup
    return SeminormSpec("m", 0) if spec.kind == "hol" else spec


def continuity_verdicts(rows: Sequence[ContinuityRow], spec: SeminormSpec, accept: float) -> dict:
    """Per test function: a verdict for each semimetric column, from the table alone."""
    out = {}
    for fi in sorted({r.f_index for r in rows}):
        mine = [r for r in rows if r.f_index == fi]
        tail = mine[-(TAIL + 1):]
        if any(r.status != ROW_OK for r in tail):
            out[fi] = {"semimetric_nu0": FAIL, "semimetric_num": FAIL}
            continue
        ok_rows = [r for r in mine if r.status == ROW_OK]
        v0 = PASS if eventually_small([r.semimetric_nu0 for r in ok_rows], accept) else FAIL
        if spec.kind in ("m+lip", "omega"):
            vm = NON_GUARANTEED
        else:
            vm = PASS if eventually_small([r.semimetric_num for r in ok_rows], accept) else FAIL
        out[fi] = {"semimetric_nu0": v0, "semimetric_num": vm}
    return out


def run_continuity(cfg: ExperimentConfig, threads: int = 1) -> ContinuityReport:
    man = cfg.build_manifold()
    X = cfg.build_field()
    K = cfg.build_compact()
    spec = cfg.build_seminorm()
    fspec = _flow_spec(spec)
    gspec = _flow_spec(spec)
    fs = cfg.build_test_functions()
    tol = cfg.tolerances
    p0 = tuple(cfg.parameters.p0)
    t0, t1 = cfg.time.t0, cfg.time.t1
    S = cfg.time.grid()
    base = LocalFlowNum(man, X, p0, tol.flow)
    if not base.map(t1, t0, K.points).all_defined:
        raise FlowDomainError("flow of p0 leaves the chart box on K; continuity experiment needs it defined")

    def row(item):
        k, pk = item
        dist = float(np.linalg.norm(np.subtract(pk, p0))) if p0 else 0.0
        gap = parameter_gap(man, X, pk, p0, K, S, gspec, rtol=tol.quadrature)
        flow = LocalFlowNum(man, X, pk, tol.flow)
        out = []
        for fi, f in enumerate(fs):
            try:
                d0 = flow_semimetric(flow, base, t1, t0, K, f, SeminormSpec("m", 0))
                dm = flow_semimetric(flow, base, t1, t0, K, f, fspec)
                out.append(ContinuityRow(k, fi, dist, gap, d0, dm))
            except FlowDomainError:
                out.append(ContinuityRow(k, fi, dist, gap, math.nan, math.nan, ROW_UNDEFINED))
        return out

    items = list(enumerate(cfg.parameters.values(), start=1))
    rows = [r for batch in _map_rows(row, items, threads) for r in batch]
    rows.sort(key=lambda r: (r.f_index, r.k))
    rep = ContinuityReport(rows, spec, tol.accept)
    rep.verdicts = continuity_verdicts(rows, spec, tol.accept)
    rep.metadata = {
        "mesh": K.mesh,
        "n_points": len(K),
        "flow_tol": tol.flow,
        "quadrature_rtol": tol.quadrature,
        "seminorm": {"kind": spec.kind, "order": spec.order, "m_max": spec.m_max},
        "parameter_space": "explicit sequence p_k -> p0 (convergent-sequence surrogate)",
        "undefined_rows": sorted({r.k for r in rows if r.status != ROW_OK}),
    }
    if rep.metadata["undefined_rows"]:
        rep.metadata["note"] = "flow left the chart for some p_k; those p_k may lie outside the parameter neighbourhood where the flow is defined on K"
    return rep


# ---------------------------------------------------------------------------
# compactness
# ---------------------------------------------------------------------------


@dataclass
class CompactnessRow:
    k: int
    param: tuple
    n_exited: int
    lo: list[float]
    hi: list[float]
    inside_margin: bool


@dataclass
class CompactnessReport:
    rows: list[CompactnessRow]
    margin: float
    k_star: int | None
    offending: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return PASS if self.k_star is not None else FAIL


def _trajectory_bbox(man, X, p, K, times, tol):
    flow = LocalFlowNum(man, X, p, tol)
    pts = K.points.copy()
    alive = np.ones(len(pts), dtype=bool)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    offending = []
    for a, b in zip(times[:-1], times[1:]):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        res = flow.map(float(b), float(a), pts[idx])
        pts[idx] = res.states
        lo = np.minimum(lo, res.states.min(axis=0))
        hi = np.maximum(hi, res.states.max(axis=0))
        for j in np.flatnonzero(res.exited):
            offending.append({"x0": K.points[idx[j]].tolist(), "t_exit_before": float(b)})
        alive[idx[res.exited]] = False
    return lo, hi, int((~alive).sum()), offending


def run_compactness(cfg: ExperimentConfig, threads: int = 1) -> CompactnessReport:
    man = cfg.build_manifold()
    X = cfg.build_field()
    K = cfg.build_compact()
    tol = cfg.tolerances
    t0, t1 = cfg.time.t0, cfg.time.t1
    times = np.linspace(t0, t1, tol.time_samples)
    box = np.asarray(man.box)
    centre, half = box.mean(axis=1), 0.5 * (box[:, 1] - box[:, 0])
    inner_lo, inner_hi = centre - (1 - tol.margin) * half, centre + (1 - tol.margin) * half

    def row(item):
        k, pk = item
        lo, hi, n_exit, bad = _trajectory_bbox(man, X, pk, K, times, tol.flow)
        ok = n_exit == 0 and bool(np.all(lo > inner_lo) and np.all(hi < inner_hi))
        return CompactnessRow(k, tuple(pk), n_exit, lo.tolist(), hi.tolist(), ok), bad

    results = _map_rows(row, list(enumerate(cfg.parameters.values(), start=1)), threads)
    rows = [r for r, _ in results]
    k_star = None
    for r in reversed(rows):
        if not r.inside_margin:
            break
        k_star = r.k
    offending = [] if k_star is not None else [b for _, bad in results for b in bad[:5]]
    return CompactnessReport(rows, tol.margin, k_star, offending)


# ---------------------------------------------------------------------------
# composite sections
# ---------------------------------------------------------------------------


@dataclass
class CompositeReport:
    offsets: list[float]
    distances: list[float]
    integrals: list[float]
    differences: list[float]
    base_integral: float
    accept: float

    @property
    def verdict(self) -> str:
        return PASS if eventually_small(self.differences, self.accept) else FAIL


def _composite_curve(cfg: ExperimentConfig, man, X, S: TimeGrid):
    cc = cfg.composite
    if cc.curve is not None:
        return ExprCurve(cc.curve)
    x0 = cc.x0 if cc.x0 is not None else cfg.build_compact().points[0].tolist()
    flow = LocalFlowNum(man, X, tuple(cfg.parameters.p0), cfg.tolerances.flow)
    traj = flow.trajectory(S.a, x0, S.b)
    if traj.exited:
        raise FlowDomainError("composite base trajectory leaves the chart box")
    return traj


def run_composite(cfg: ExperimentConfig, threads: int = 1) -> CompositeReport:
    man = cfg.build_manifold()
    X = cfg.build_field()
    f = cfg.build_composite_f()
    S = cfg.time.grid()
    gamma = _composite_curve(cfg, man, X, S)
    n = man.dim
    direction = np.ones(n) if cfg.composite.direction is None else np.asarray(cfg.composite.direction, dtype=float)
    offsets = [float(o) for o in cfg.composite.offsets]
    perturbed = [OffsetCurve(gamma, o * direction) for o in offsets]
    rep = composite_continuity_probe(man, f, gamma, perturbed, S, rtol=cfg.tolerances.quadrature)
    return CompositeReport(offsets, rep.distances, rep.integrals, rep.differences, rep.base_integral, cfg.tolerances.accept)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


@dataclass
class InvariantsReport:
    seed: int
    checks: list

    @property
    def verdict(self) -> str:
        return PASS if all(c.passed for c in self.checks) else FAIL

    def as_dict(self) -> dict:
        return {"seed": self.seed, "verdict": self.verdict, "checks": [c.as_dict() for c in self.checks]}


def run_invariants(cfg: ExperimentConfig, seed: int | None = None) -> InvariantsReport:
    s = cfg.seed if seed is None else seed
    return InvariantsReport(s, run_checks(cfg, s))


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def write_continuity(rep: ContinuityReport, out: Path) -> list[Path]:
    paths = [out / "continuity.csv"]
    _write(paths[0], _csv_text(CONTINUITY_COLUMNS, [r.values() for r in rep.rows]))
    for fi in sorted(rep.verdicts):
        mine = [r for r in rep.rows if r.f_index == fi]
        for col in ("semimetric_nu0", "semimetric_num"):
            p = out / f"continuity_f{fi}_{col}.plot.csv"
            _write(p, _csv_text(["x", "y"], [(r.k, getattr(r, col)) for r in mine]))
            paths.append(p)
    p = out / "gap_eq24.plot.csv"
    seen = {}
    for r in rep.rows:
        seen.setdefault(r.k, r.gap_eq24)
    _write(p, _csv_text(["x", "y"], sorted(seen.items())))
    paths.append(p)
    return paths


def write_compactness(rep: CompactnessReport, out: Path) -> list[Path]:
    n = len(rep.rows[0].lo) if rep.rows else 0
    header = ["k", "n_exited", *[f"lo_{i + 1}" for i in range(n)], *[f"hi_{i + 1}" for i in range(n)], "inside_margin"]
    rows = [[r.k, r.n_exited, *r.lo, *r.hi, r.inside_margin] for r in rep.rows]
    paths = [out / "compactness.csv", out / "compactness.plot.csv"]
    _write(paths[0], _csv_text(header, rows))
    _write(paths[1], _csv_text(["x", "y"], [(r.k, max(max(abs(v) for v in r.lo), max(abs(v) for v in r.hi))) for r in rep.rows]))
    return paths


def write_composite(rep: CompositeReport, out: Path) -> list[Path]:
    header = ["j", "offset", "sup_distance", "integral", "difference"]
    rows = [
        [j, o, d, i, df]
        for j, (o, d, i, df) in enumerate(zip(rep.offsets, rep.distances, rep.integrals, rep.differences), start=1)
    ]
    paths = [out / "composite.csv", out / "composite.plot.csv"]
    _write(paths[0], _csv_text(header, rows))
    _write(paths[1], _csv_text(["x", "y"], list(zip(rep.distances, rep.differences))))
    return paths


def write_invariants(rep: InvariantsReport, out: Path) -> Path:
    p = out / "invariants.json"
    _write(p, _json_text(rep.as_dict()))
    return p


@dataclass
class RunResult:
    verdicts: dict
    paths: list[Path]

    @property
    def passed(self) -> bool:
        return all(v == PASS for v in self.verdicts.values())


def run_all(cfg: ExperimentConfig, out: str | Path | None = None, threads: int = 1) -> RunResult:
    """Run every configured experiment, write reports and a summary."""
    out = Path(out if out is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    verdicts: dict[str, str] = {}
    summary: dict = {"name": cfg.name, "seed": cfg.seed, "experiments": {}}
    paths: list[Path] = []
    if "continuity" in cfg.experiments:
        rep = run_continuity(cfg, threads)
        paths += write_continuity(rep, out)
        verdicts["continuity"] = rep.verdict
        summary["experiments"]["continuity"] = {
            "verdict": rep.verdict,
            "per_test_function": {str(k): v for k, v in rep.verdicts.items()},
            "accept": rep.accept,
            **rep.metadata,
        }
    if "compactness" in cfg.experiments:
        rep = run_compactness(cfg, threads)
        paths += write_compactness(rep, out)
        verdicts["compactness"] = rep.verdict
        summary["experiments"]["compactness"] = {
            "verdict": rep.verdict,
            "k_star": rep.k_star,
            "margin": rep.margin,
            "offending": rep.offending,
        }
    if "composite" in cfg.experiments:
        rep = run_composite(cfg, threads)
        paths += write_composite(rep, out)
        verdicts["composite"] = rep.verdict
        summary["experiments"]["composite"] = {"verdict": rep.verdict, "base_integral": rep.base_integral}
    if "invariants" in cfg.experiments:
        rep = run_invariants(cfg)
        paths.append(write_invariants(rep, out))
        verdicts["invariants"] = rep.verdict
        summary["experiments"]["invariants"] = {"verdict": rep.verdict}
    summary["verdicts"] = verdicts
    p = out / "summary.json"
    _write(p, _json_text(summary))
    paths.append(p)
    return RunResult(verdicts, paths)
