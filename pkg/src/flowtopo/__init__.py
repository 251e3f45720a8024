"""Numerical flows of parameter-dependent vector fields on chart manifolds,
with jet seminorms and continuity experiments."""
from .expr import EvaluationError, Expr, ExprError, ExprSyntaxError, differentiate, evaluate, parse, to_source
from .flows import LocalFlowNum, Trajectory, flow_axiom_check, flow_semimetric, integrate
from .geometry import ChartManifold, MetricError, parallel_transport
from .jets import JetValue, VectorFieldExpr, covariant_jet, jet_norm
from .seminorms import CompactSample, SeminormSpec, TimeGrid, parameter_gap, seminorm

__version__ = "0.1.0"
