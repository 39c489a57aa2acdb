"""Executable sub-manoeuvre halves, SIM wrappers and manoeuvre chaining.

Instances here are pure bookkeeping: stepping one returns the primitives to
execute and where the machine went, and never touches a vehicle directly.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .core import IdleState, Message, MessageKind, Primitive, PrimitiveOp, VehicleId
from .mdl import (
    TERMINATE,
    CompiledManoeuvre,
    CompiledSubManoeuvre,
    EventPattern,
    Step,
)

_EXPR_RE = re.compile(r"^(-)?(?:([0-9]+(?:\.[0-9]+)?)\*)?\$([A-Za-z_][A-Za-z0-9_.]*)$")


class StateMachineError(Exception):
    code = "STATE_MACHINE"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class UnexpectedEvent(StateMachineError):
    code = "UNEXPECTED_EVENT"


class UndeclaredResult(StateMachineError):
    code = "UNDECLARED_RESULT"


class SimWrapperError(StateMachineError):
    pass


def resolve(value: Any, ctx: Mapping[str, Any]) -> Any:
    """Evaluate ``$name``, ``-$name`` and ``k*$name`` references against ``ctx``."""
    if isinstance(value, (list, tuple)):
        return tuple(resolve(v, ctx) for v in value)
    if not isinstance(value, str):
        return value
    m = _EXPR_RE.match(value)
    if m is None:
        return value
    neg, scale, name = m.groups()
    if name not in ctx:
        raise KeyError(f"unbound reference ${name}")
    out = ctx[name]
    if neg or scale:
        if isinstance(out, bool) or not isinstance(out, (int, float)):
            raise TypeError(f"${name} is not numeric")
        out = out * (float(scale) if scale else 1) * (-1 if neg else 1)
    return out


@dataclass(frozen=True)
class Event:
    kind: str  # msg | timeout | arrived | decide | lli
    message: Message | None = None
    value: str | None = None

    @classmethod
    def msg(cls, message: Message) -> "Event":
        return cls("msg", message)

    @classmethod
    def timeout(cls) -> "Event":
        return cls("timeout")

    @classmethod
    def arrived(cls) -> "Event":
        return cls("arrived")

    @classmethod
    def decide(cls, accept: bool) -> "Event":
        return cls("decide", value="accept" if accept else "reject")

    @classmethod
    def lli(cls) -> "Event":
        return cls("lli")

    def __str__(self) -> str:
        if self.message is not None:
            return self.message.label
        return self.kind if self.value is None else f"{self.kind}:{self.value}"


def matches(pattern: EventPattern, event: Event) -> bool:
    if pattern.kind != event.kind:
        return False
    if pattern.kind == "msg":
        msg = event.message
        return msg is not None and msg.kind is pattern.msg_kind and (pattern.action is None or pattern.action == msg.action)
    if pattern.kind == "decide":
        return pattern.value == event.value
    return True


@dataclass
class StepOutcome:
    primitives: list[Primitive]
    state: str | None = None
    result: str | None = None
    final_idle: IdleState | None = None
    entered: list[str] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.result is not None


@dataclass
class SubMachineInstance:
    """One role's half of a running sub-manoeuvre.

    ``state`` is ``None`` until the trigger event arrives.  ``participants``
    maps every role of the sub-manoeuvre to a vehicle.
    """

    sub: CompiledSubManoeuvre
    role: str
    correlation: str
    participants: dict[str, VehicleId]
    context: dict[str, Any] = field(default_factory=dict)
    started_at: float = 0.0
    state: str | None = None
    result: str | None = None
    args: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.role not in self.participants:
            raise ValueError(f"role {self.role} is not bound")
        # precedence: environment < declared params < invocation args.  Params
        # are defaults for the controlling half only; the reactive half learns
        # values from the triggering message payload.
        env = {**self.context, **self.participants}
        ctx = dict(self.context)
        if self.role == self.sub.controlling.name:
            ctx.update({k: resolve(v, env) for k, v in self.sub.params.items()})
        ctx.update({k: resolve(v, env) for k, v in self.args.items()})
        ctx.update(self.participants)
        self.context = ctx

    @property
    def role_def(self):
        return self.sub.role(self.role)

    @property
    def trigger(self) -> EventPattern:
        if self.role == self.sub.controlling.name:
            return self.sub.controlling_trigger
        return self.role_def.trigger

    @property
    def vehicle(self) -> VehicleId:
        return self.participants[self.role]

    @property
    def completed(self) -> bool:
        return self.result is not None

    @property
    def is_controlling(self) -> bool:
        return self.role == self.sub.controlling.name

    def current(self):
        if self.state is None:
            return None
        return self.sub.states[self.role][self.state]

    def awaits(self, kind: str) -> bool:
        st = self.current()
        return st is not None and any(t.on.kind == kind for t in st.transitions)

    def step(self, event: Event) -> StepOutcome:
        if self.completed:
            raise UnexpectedEvent(f"{self.sub.id}/{self.role} already concluded with {self.result}")
        if self.state is None:
            if not matches(self.trigger, event):
                raise UnexpectedEvent(f"{event} does not trigger {self.sub.id}/{self.role}")
            if event.message is not None:
                self.context.update({k: v for k, v in event.message.payload.items()})
            return self._enter(self.role_def.initial)
        state = self.current()
        for t in state.transitions:
            if t.on.kind != "done" and matches(t.on, event):
                return self._enter(t.to)
        raise UnexpectedEvent(f"{event} is not expected by {self.sub.id}/{self.role} in {self.state}")

    def _enter(self, target: str) -> StepOutcome:
        out = StepOutcome([])
        table = self.sub.states[self.role]
        while True:
            if target not in table:
                if target not in self.sub.results:
                    raise UndeclaredResult(f"{target} is not a result of {self.sub.id}")
                self.state = None
                self.result = target
                out.result = target
                out.final_idle = self.sub.results[target][self.role]
                return out
            self.state = target
            out.entered.append(target)
            st = table[target]
            out.primitives.extend(self._resolve(p) for p in st.primitives)
            done = [t for t in st.transitions if t.on.kind == "done"]
            if not done:
                out.state = target
                return out
            target = done[0].to

    def _resolve(self, p: Primitive) -> Primitive:
        args = {}
        for k, v in p.params:
            if p.op is PrimitiveOp.SND and k == "to":
                args[k] = self.participants[v]
            elif k == "payload":
                args[k] = tuple((pk, resolve(pv, self.context)) for pk, pv in v)
            else:
                args[k] = resolve(v, self.context)
        if p.op is PrimitiveOp.SND:
            args.setdefault("action", self.sub.id)
        return Primitive.make(p.op, **args)


def step(instance: SubMachineInstance, event: Event) -> StepOutcome:
    return instance.step(event)


@dataclass
class SimWrapperInstance:
    """Product of several controlling halves run side by side by one leader."""

    children: list[SubMachineInstance]
    results: dict[int, str] = field(default_factory=dict)

    def record(self, child: SubMachineInstance, label: str) -> None:
        self.results[self.children.index(child)] = label

    @property
    def completed(self) -> bool:
        return len(self.results) == len(self.children)

    @property
    def outcome(self) -> tuple[str, ...]:
        if not self.completed:
            raise StateMachineError("SIM wrapper still running")
        return tuple(self.results[i] for i in range(len(self.children)))

    def outcome_set(self) -> list[tuple[str, ...]]:
        return [tuple(c) for c in itertools.product(*(ch.sub.labels for ch in self.children))]


def wrap_sim(children: list[SubMachineInstance]) -> SimWrapperInstance:
    if len(children) < 2:
        raise SimWrapperError("a SIM wrapper needs at least two children", "SIM_ARITY")
    leaders = {c.vehicle for c in children}
    if len(leaders) != 1 or not all(c.is_controlling for c in children):
        raise SimWrapperError("all children must be controlling halves of one leader", "SIM_DIFFERENT_LEADER")
    (leader,) = leaders
    seen: set[VehicleId] = set()
    for c in children:
        vs = {v for r, v in c.participants.items() if r != c.role} - {leader}
        if vs & seen:
            raise SimWrapperError(f"vehicles {sorted(vs & seen)} take part twice", "SIM_PARTICIPANT_OVERLAP")
        seen |= vs
    return SimWrapperInstance(list(children))


@dataclass
class NextAction:
    kind: str  # "invoke" | "terminate"
    step: Step | None = None
    invocations: list[tuple[CompiledSubManoeuvre, dict[str, VehicleId], dict[str, Any]]] = field(default_factory=list)


@dataclass
class ManoeuvreInstance:
    manoeuvre: CompiledManoeuvre
    leader: VehicleId
    bindings: dict[str, VehicleId]
    context: dict[str, Any] = field(default_factory=dict)
    step_id: str | None = None
    history: list[tuple[str, Any]] = field(default_factory=list)
    terminated: bool = False
    started_at: float = 0.0

    def __post_init__(self) -> None:
        self.bindings = {**self.bindings, self.manoeuvre.leader_role: self.leader}

    def plan(self, step_id: str) -> NextAction:
        step = self.manoeuvre.steps[step_id]
        invs = []
        for inv in step.invocations:
            sub = self.manoeuvre.subs[inv.action]
            parts = {sub.controlling.name: self.leader}
            for sub_role, man_role in inv.participants:
                parts[sub_role] = self.bindings[man_role]
            invs.append((sub, parts, dict(inv.args)))
        return NextAction("invoke", step, invs)

    def start(self) -> NextAction:
        self.step_id = self.manoeuvre.initial
        return self.plan(self.step_id)


def advance_manoeuvre(instance: ManoeuvreInstance, result: Any) -> NextAction:
    """Record ``result`` for the current step and return what comes next."""
    if instance.terminated or instance.step_id is None:
        raise StateMachineError("manoeuvre is not running")
    step = instance.manoeuvre.steps[instance.step_id]
    if isinstance(result, list):
        result = tuple(result)
    to = step.next_for(result)
    if to is None:
        raise UndeclaredResult(f"{result} is not declared for step {step.id}")
    instance.history.append((step.id, result))
    if to == TERMINATE:
        instance.terminated = True
        instance.step_id = None
        return NextAction("terminate")
    instance.step_id = to
    return instance.plan(to)


__all__ = [
    "Event",
    "ManoeuvreInstance",
    "MessageKind",
    "NextAction",
    "SimWrapperError",
    "SimWrapperInstance",
    "StepOutcome",
    "SubMachineInstance",
    "UndeclaredResult",
    "UnexpectedEvent",
    "advance_manoeuvre",
    "matches",
    "resolve",
    "step",
    "wrap_sim",
]
