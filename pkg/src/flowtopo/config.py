"""Experiment configuration: JSON schema, dataclasses and object builders."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from .expr import ExprError
from .geometry import ChartManifold
from .jets import VectorFieldExpr
from .seminorms import KINDS, CompactSample, SeminormSpec, TimeGrid

EXPERIMENTS = ("continuity", "compactness", "composite", "invariants")

_num = {"type": "number"}
_interval = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_vector = {"type": "array", "items": _num}
_strings = {"type": "array", "items": {"type": "string"}, "minItems": 1}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "flowtopo experiment",
    "type": "object",
    "required": ["manifold", "field", "parameters", "compact", "time", "test_functions"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "default": 42},
        "output": {"type": "string", "description": "output directory (overridden by --out)"},
        "experiments": {"type": "array", "items": {"enum": list(EXPERIMENTS)}},
        "manifold": {
            "type": "object",
            "required": ["dim", "box"],
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "box": {"type": "array", "items": _interval, "minItems": 1},
                "metric": {"type": "array", "items": _strings, "description": "metric matrix, exprs in x1..xn"},
                "connection": {"enum": ["levi-civita", "explicit"], "default": "levi-civita"},
                "christoffel": {
                    "type": "array",
                    "items": {"type": "array", "items": _strings},
                    "description": "Gamma[k][i][j] exprs, used when connection is explicit",
                },
            },
        },
        "field": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_params": {"type": "integer", "minimum": 0, "default": 0},
                "components": _strings,
                "pieces": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["components"],
                        "additionalProperties": False,
                        "properties": {"stop": {"type": ["number", "null"]}, "components": _strings},
                    },
                    "description": "piecewise-in-time field; each piece runs up to its stop (breakpoint)",
                },
            },
        },
        "parameters": {
            "type": "object",
            "required": ["p0"],
            "additionalProperties": False,
            "properties": {
                "p0": _vector,
                "sequence": {"type": "array", "items": _vector, "minItems": 1},
                "delta": _num,
                "direction": _vector,
                "n": {"type": "integer", "minimum": 1},
            },
        },
        "compact": {
            "type": "object",
            "required": ["box", "resolution"],
            "additionalProperties": False,
            "properties": {
                "box": {"type": "array", "items": _interval, "minItems": 1},
                "resolution": {
                    "oneOf": [
                        {"type": "integer", "minimum": 2},
                        {"type": "array", "items": {"type": "integer", "minimum": 2}},
                    ]
                },
            },
        },
        "seminorm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(KINDS)},
                "order": {"type": "integer", "minimum": 0},
                "weights": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "m_max": {"type": "integer", "minimum": 0},
            },
        },
        "time": {
            "type": "object",
            "required": ["t0", "t1"],
            "additionalProperties": False,
            "properties": {"t0": _num, "t1": _num, "S": _interval, "I": _interval, "I_prime": _interval},
        },
        "test_functions": _strings,
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "flow": {"type": "number", "exclusiveMinimum": 0},
                "quadrature": {"type": "number", "exclusiveMinimum": 0},
                "accept": {"type": "number", "exclusiveMinimum": 0},
                "margin": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "time_samples": {"type": "integer", "minimum": 2},
            },
        },
        "composite": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "f": {"type": "string", "description": "scalar expr in t, x1..xn"},
                "curve": _strings,
                "x0": _vector,
                "offsets": _vector,
                "direction": _vector,
            },
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class ManifoldConfig:
    dim: int
    box: list[list[float]]
    metric: list[list[str]] | None = None
    connection: str = "levi-civita"
    christoffel: list | None = None

    def build(self) -> ChartManifold:
        table = self.christoffel if self.connection == "explicit" else None
        if self.connection == "explicit" and table is None:
            raise ConfigError("explicit connection needs a christoffel table")
        return ChartManifold.build(self.dim, self.box, self.metric, table)


@dataclass
class FieldConfig:
    components: list[str] | None = None
    pieces: list[dict] | None = None
    n_params: int = 0

    def build(self, n: int) -> VectorFieldExpr:
        if self.pieces:
            spec = [(math.inf if pc.get("stop") is None else pc["stop"], pc["components"]) for pc in self.pieces]
            return VectorFieldExpr.piecewise(spec, n, self.n_params)
        if not self.components:
            raise ConfigError("field needs components or pieces")
        return VectorFieldExpr.parse(self.components, n, self.n_params)


@dataclass
class ParameterConfig:
    p0: list[float]
    sequence: list[list[float]] | None = None
    delta: float = 1.0
    direction: list[float] | None = None
    n: int = 10

    def values(self) -> list[tuple[float, ...]]:
        """The sequence p_k, k = 1..N; explicit if given, else p0 + delta 2^-k direction."""
        if self.sequence is not None:
            return [tuple(float(v) for v in p) for p in self.sequence]
        d = np.ones(len(self.p0)) if self.direction is None else np.asarray(self.direction, dtype=float)
        p0 = np.asarray(self.p0, dtype=float)
        return [tuple((p0 + self.delta * 2.0**-k * d).tolist()) for k in range(1, self.n + 1)]


@dataclass
class CompactConfig:
    box: list[list[float]]
    resolution: int | list[int] = 33

    def build(self) -> CompactSample:
        return CompactSample.grid(self.box, self.resolution)


@dataclass
class SeminormConfig:
    kind: str = "m"
    order: int = 1
    weights: list[float] | None = None
    m_max: int = 2

    def build(self) -> SeminormSpec:
        return SeminormSpec(self.kind, self.order, None if self.weights is None else tuple(self.weights), self.m_max)


@dataclass
class TimeConfig:
    t0: float
    t1: float
    S: list[float] | None = None
    I: list[float] | None = None
    I_prime: list[float] | None = None

    def grid(self, breakpoints: Sequence[float] = ()) -> TimeGrid:
        a, b = self.S if self.S is not None else sorted((self.t0, self.t1))
        return TimeGrid(float(a), float(b), breakpoints=tuple(breakpoints))


@dataclass
class Tolerances:
    flow: float = 1e-9
    quadrature: float = 1e-6
    accept: float = 1e-2
    margin: float = 0.05
    time_samples: int = 33


@dataclass
class CompositeConfig:
    f: str = "x1"
    curve: list[str] | None = None
    x0: list[float] | None = None
    offsets: list[float] = field(default_factory=lambda: [2.0**-j for j in range(11)])
    direction: list[float] | None = None


@dataclass
class ExperimentConfig:
    manifold: ManifoldConfig
    field: FieldConfig
    parameters: ParameterConfig
    compact: CompactConfig
    time: TimeConfig
    test_functions: list[str]
    seminorm: SeminormConfig = field(default_factory=SeminormConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    experiments: list[str] = field(default_factory=lambda: list(EXPERIMENTS))
    seed: int = 42
    name: str = "experiment"
    output: str = "out"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as err:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {err.message}") from None
        d = dict(data)
        cfg = cls(
            manifold=ManifoldConfig(**d.pop("manifold")),
            field=FieldConfig(**d.pop("field")),
            parameters=ParameterConfig(**d.pop("parameters")),
            compact=CompactConfig(**d.pop("compact")),
            time=TimeConfig(**d.pop("time")),
            test_functions=list(d.pop("test_functions")),
            seminorm=SeminormConfig(**d.pop("seminorm", {})),
            tolerances=Tolerances(**d.pop("tolerances", {})),
            composite=CompositeConfig(**d.pop("composite", {})),
            **d,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        n = self.manifold.dim
        if len(self.manifold.box) != n or len(self.compact.box) != n:
            raise ConfigError("manifold and compact boxes must have one interval per dimension")
        res = self.compact.resolution
        if isinstance(res, list) and len(res) != n:
            raise ConfigError("compact resolution needs one entry per dimension")
        if len(self.parameters.p0) != self.field.n_params:
            raise ConfigError(f"p0 has {len(self.parameters.p0)} entries, field declares {self.field.n_params}")
        if not self.parameters.values():
            raise ConfigError("parameter sequence is empty")
        for pk in self.parameters.values():
            if len(pk) != self.field.n_params:
                raise ConfigError("parameter sequence entries must match n_params")
        try:
            self.build_manifold()
            self.build_field()
            self.build_test_functions()
            self.build_seminorm()
            self.build_composite_f()
            if self.composite.curve is not None:
                from .flows import ExprCurve

                if len(ExprCurve(self.composite.curve).components) != n:
                    raise ConfigError("composite curve needs one component per dimension")
        except ExprError as err:
            raise ConfigError(f"expression error: {err}") from None
        spec = self.build_seminorm()
        if spec.kind != "hol":
            order = spec.m_max if spec.kind == "omega" else spec.order
            if order > 2:
                raise ConfigError(f"flow jets need order <= 2, seminorm asks for {order}")
        man = self.build_manifold()
        K = self.build_compact()
        if not man.contains(K.points).all():
            raise ConfigError("compact set must lie inside the chart box")

    def build_manifold(self) -> ChartManifold:
        return self.manifold.build()

    def build_field(self) -> VectorFieldExpr:
        return self.field.build(self.manifold.dim)

    def build_compact(self) -> CompactSample:
        return self.compact.build()

    def build_seminorm(self) -> SeminormSpec:
        return self.seminorm.build()

    def build_test_functions(self) -> list[VectorFieldExpr]:
        return [VectorFieldExpr.scalar(f, self.manifold.dim) for f in self.test_functions]

    def build_composite_f(self) -> VectorFieldExpr:
        return VectorFieldExpr.scalar(self.composite.f, self.manifold.dim)


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True)
