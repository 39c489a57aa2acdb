"""Stable, safe platoon manoeuvres built from reusable sub-manoeuvres.

Modules:

* ``core``: idle states, messages and action primitives
* ``mdl``: the JSON definition language, validator and compiler
* ``statemachine``: interpreter for sub-manoeuvre halves and manoeuvre chains
* ``runtime``: the per-vehicle agent
* ``simulation``: deterministic multi-vehicle simulator
* ``verification``: outcome enumeration and protocol checks
* ``catalogue``: shipped definitions and scenarios
"""
from .catalogue import builtin_registry
from .core import IdleState, Message, MessageKind, Primitive, PrimitiveOp
from .mdl import compile, compile_registry, parse, serialize, validate
from .simulation import SimConfig, World, run
from .verification import enumerate_outcomes, verify

__version__ = "0.1.0"

__all__ = [
    "IdleState",
    "Message",
    "MessageKind",
    "Primitive",
    "PrimitiveOp",
    "SimConfig",
    "World",
    "builtin_registry",
    "compile",
    "compile_registry",
    "enumerate_outcomes",
    "parse",
    "run",
    "serialize",
    "validate",
    "verify",
]
