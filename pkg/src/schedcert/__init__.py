"""Sound and complete verification of GNN-based job schedulers."""

from .domain import InputRegion, LinCons
from .fb import EngineConfig, Status, Verdict, analyze
from .model import GnnArch, JobGraph, LayeredNet, Mlp, Transition, TransitionSystem, eval_concrete, unroll
from .multistep import check_with_trace_enumeration, encode_steps
from .nodeabs import check_with_node_abstraction

__all__ = [
    "EngineConfig", "GnnArch", "InputRegion", "JobGraph", "LayeredNet", "LinCons", "Mlp", "Status", "Transition",
    "TransitionSystem", "Verdict", "analyze", "check_with_node_abstraction", "check_with_trace_enumeration",
    "encode_steps", "eval_concrete", "unroll",
]
