"""Shared vocabulary: idle states, message kinds, action primitives and messages.

All enums use their canonical short names (``"WPF"``, ``"ORD"``, ``"MTP"``) as
values, which is also how they appear in MDL files and traces.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

VehicleId = str
ActionId = str
CorrelationId = str

RS = "RS"


class IdleState(str, enum.Enum):
    FV = "FV"
    PF = "PF"
    PL = "PL"
    WFV = "WFV"
    WPF = "WPF"
    WPL = "WPL"
    TPL = "TPL"

    def __str__(self) -> str:
        return self.value


class MessageKind(str, enum.Enum):
    REQ = "REQ"
    ORD = "ORD"
    ACK = "ACK"
    NACK = "NACK"
    DN = "DN"
    ABT = "ABT"
    TMPL_SPLIT = "TMPL_SPLIT"

    def __str__(self) -> str:
        return self.value


class PrimitiveOp(str, enum.Enum):
    MTP = "MTP"
    SH = "SH"
    BFV = "BFV"
    BPL = "BPL"
    BPF = "BPF"
    BTL = "BTL"
    SW = "SW"
    USW = "USW"
    W = "W"
    SND = "SND"
    UPI = "UPI"

    def __str__(self) -> str:
        return self.value


STABLE = frozenset({IdleState.FV, IdleState.PF, IdleState.PL})
UNSTABLE = frozenset({IdleState.WFV, IdleState.WPF, IdleState.WPL, IdleState.TPL})

_WAITING = {
    IdleState.FV: IdleState.WFV,
    IdleState.PF: IdleState.WPF,
    IdleState.PL: IdleState.WPL,
}
_UNWAITING = {v: k for k, v in _WAITING.items()}

_ALL = frozenset(IdleState)

# Actor column of the primitives table.
ACTORS: dict[PrimitiveOp, frozenset[IdleState]] = {
    PrimitiveOp.MTP: frozenset({IdleState.FV, IdleState.PL, IdleState.TPL}),
    PrimitiveOp.SH: frozenset({IdleState.PF, IdleState.TPL}),
    PrimitiveOp.BFV: _ALL - {IdleState.FV},
    PrimitiveOp.BPL: _ALL - {IdleState.PL},
    PrimitiveOp.BPF: _ALL - {IdleState.PF},
    PrimitiveOp.BTL: _ALL - {IdleState.TPL},
    PrimitiveOp.SW: frozenset({IdleState.FV, IdleState.PL, IdleState.PF}),
    PrimitiveOp.USW: frozenset({IdleState.WFV, IdleState.WPL, IdleState.WPF}),
    PrimitiveOp.W: _ALL,
    PrimitiveOp.SND: _ALL,
    PrimitiveOp.UPI: frozenset({IdleState.PL}),
}

# Target idle state of the "become" primitives.
BECOMES: dict[PrimitiveOp, IdleState] = {
    PrimitiveOp.BFV: IdleState.FV,
    PrimitiveOp.BPL: IdleState.PL,
    PrimitiveOp.BPF: IdleState.PF,
    PrimitiveOp.BTL: IdleState.TPL,
}

PAYLOAD_KINDS = frozenset({MessageKind.REQ, MessageKind.ORD, MessageKind.DN})


def is_stable(state: IdleState) -> bool:
    return IdleState(state) in STABLE


def waiting_counterpart(state: IdleState) -> IdleState:
    """Map FV/PF/PL to their waiting state and back.

    TPL has no counterpart and raises ``ValueError``.
    """
    state = IdleState(state)
    if state in _WAITING:
        return _WAITING[state]
    if state in _UNWAITING:
        return _UNWAITING[state]
    raise ValueError(f"{state} has no waiting counterpart")


def primitive_allowed(op: PrimitiveOp, state: IdleState) -> bool:
    return IdleState(state) in ACTORS[PrimitiveOp(op)]


def apply_state_primitive(op: PrimitiveOp, state: IdleState) -> IdleState:
    """Idle state after executing ``op``; non-state primitives leave it as is."""
    op = PrimitiveOp(op)
    if op in BECOMES:
        return BECOMES[op]
    if op in (PrimitiveOp.SW, PrimitiveOp.USW):
        return waiting_counterpart(state)
    return IdleState(state)


def conform_path(current: IdleState, target: IdleState) -> list[PrimitiveOp]:
    """State primitives that bring ``current`` to ``target``, each actor-legal."""
    current, target = IdleState(current), IdleState(target)
    if current == target:
        return []
    if current in _UNWAITING and _UNWAITING[current] == target:
        return [PrimitiveOp.USW]
    if target in _UNWAITING:
        base = _UNWAITING[target]
        return conform_path(current, base) + [PrimitiveOp.SW]
    for op, st in BECOMES.items():
        if st == target:
            return [op]
    raise AssertionError("unreachable")


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


@dataclass(frozen=True)
class Primitive:
    """One action primitive with its parameters.

    ``params`` is stored as a sorted tuple of pairs so primitives stay hashable;
    use :meth:`get` or :attr:`args` to read them.
    """

    op: PrimitiveOp
    params: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def make(cls, op: PrimitiveOp | str, **params: Any) -> "Primitive":
        return cls(PrimitiveOp(op), tuple(sorted((k, _freeze(v)) for k, v in params.items())))

    @property
    def args(self) -> dict[str, Any]:
        return dict(self.params)

    def get(self, key: str, default: Any = None) -> Any:
        return self.args.get(key, default)

    def __str__(self) -> str:
        if not self.params:
            return self.op.value
        inner = ", ".join(f"{k}={v}" for k, v in self.params)
        return f"{self.op.value}({inner})"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    action: ActionId
    sender: VehicleId
    receivers: tuple[VehicleId, ...]
    correlation: CorrelationId
    payload: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.receivers:
            raise ValueError("message needs at least one receiver")
        if self.payload and self.kind not in PAYLOAD_KINDS and set(self.payload) - {"result", "role"}:
            raise ValueError(f"{self.kind} carries no payload")

    @property
    def label(self) -> str:
        return f"{self.kind.value}/{self.action}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "action": self.action,
            "sender": self.sender,
            "receivers": list(self.receivers),
            "correlation": self.correlation,
            "payload": {k: list(v) if isinstance(v, tuple) else v for k, v in self.payload.items()},
        }
