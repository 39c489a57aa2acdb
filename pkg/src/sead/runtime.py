"""Per-vehicle agent: reactive dispatch, the leader's manoeuvre engine and timers.

An agent never touches the world directly.  Every public method returns a
list of effects (messages to send, physical targets, platoon updates, trace
notes) which the simulation applies.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from .core import (
    ACTORS,
    RS,
    IdleState,
    Message,
    MessageKind,
    Primitive,
    PrimitiveOp,
    VehicleId,
    apply_state_primitive,
    conform_path,
    is_stable,
)
from .mdl import Behaviours, CompiledManoeuvre, CompiledSubManoeuvre
from .statemachine import (
    Event,
    ManoeuvreInstance,
    NextAction,
    SimWrapperInstance,
    StateMachineError,
    StepOutcome,
    SubMachineInstance,
    advance_manoeuvre,
    resolve,
    wrap_sim,
)

IDLE_TIMER = "idle"


class InitiationError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class PrimitiveActorViolation(Exception):
    code = "PRIMITIVE_ACTOR_VIOLATION"


@dataclass
class PlatoonInfo:
    """Leader, ordered member list (leader first) and the two target gaps."""

    leader: VehicleId | None = None
    members: list[VehicleId] = field(default_factory=list)
    d: float = 6.0
    D: float = 30.0

    def __post_init__(self) -> None:
        if len(set(self.members)) != len(self.members):
            raise ValueError("platoon members must be unique")
        if self.members and self.leader is not None and self.members[0] != self.leader:
            raise ValueError("position 0 must be the leader")

    def position(self, vehicle: VehicleId) -> int | None:
        try:
            return self.members.index(vehicle)
        except ValueError:
            return None

    def predecessor(self, vehicle: VehicleId) -> VehicleId | None:
        i = self.position(vehicle)
        return self.members[i - 1] if i else None

    @property
    def tail(self) -> VehicleId | None:
        return self.members[-1] if self.members else None


# ---------------------------------------------------------------- effects

@dataclass(frozen=True)
class Send:
    message: Message


@dataclass(frozen=True)
class SetTarget:
    """Register a physical goal: ``kind`` is ``MTP`` or ``SH``."""

    vehicle: VehicleId
    kind: str
    params: tuple[tuple[str, Any], ...]
    token: int


@dataclass(frozen=True)
class ClearTarget:
    vehicle: VehicleId
    kind: str  # MTP | SH | all


@dataclass(frozen=True)
class PlatoonUpdate:
    leader: VehicleId
    members: tuple[VehicleId, ...]


@dataclass(frozen=True)
class Detach:
    """Announce that ``vehicle`` and everyone behind it now form their own platoon."""

    vehicle: VehicleId


@dataclass(frozen=True)
class Note:
    vehicle: VehicleId
    kind: str
    detail: dict[str, Any]


Effect = Union[Send, SetTarget, ClearTarget, PlatoonUpdate, Detach, Note]


# ---------------------------------------------------------------- policy

AdmissionPolicy = Callable[["VehicleAgent", CompiledManoeuvre, dict], bool]


def default_admission(agent: "VehicleAgent", manoeuvre: CompiledManoeuvre, bindings: dict) -> bool:
    newcomers = [v for v in bindings.values() if v not in agent.platoon.members]
    return agent.idle is IdleState.PL and len(agent.platoon.members) + len(newcomers) <= agent.config.max_platoon_size


POLICIES: dict[str, AdmissionPolicy] = {
    "default": default_admission,
    "accept": lambda agent, m, b: True,
    "reject": lambda agent, m, b: False,
}


@dataclass
class AgentConfig:
    d: float = 6.0
    D: float = 30.0
    max_platoon_size: int = 8
    default_timeout: float = 30.0
    idle_timeout: float = 120.0
    policy: str = "default"


@dataclass
class _Concluded:
    sub: CompiledSubManoeuvre
    role: str
    result: str
    participants: dict[str, VehicleId]


class VehicleAgent:
    """One vehicle's platooning layer."""

    def __init__(
        self,
        vid: VehicleId,
        idle: IdleState,
        behaviours: Behaviours,
        platoon: PlatoonInfo | None = None,
        config: AgentConfig | None = None,
        lane: int = 0,
    ):
        self.id = vid
        self.idle = IdleState(idle)
        self.behaviours = behaviours
        self.config = config or AgentConfig()
        self.platoon = platoon or PlatoonInfo(d=self.config.d, D=self.config.D)
        self.lane = lane
        self.reactive: SubMachineInstance | None = None
        self.manoeuvre: ManoeuvreInstance | None = None
        self.manoeuvre_id: str | None = None
        self.controlling: dict[str, SubMachineInstance] = {}
        self.sim: SimWrapperInstance | None = None
        self.timers: dict[tuple[str, str], float] = {}
        self.concluded: dict[str, _Concluded] = {}
        self.arrival_token: int | None = None
        # the simulation may move a deadline (fault injection)
        self.timer_hook: Callable[["VehicleAgent", tuple[str, str], float], float] = lambda a, k, d: d
        self.env: Callable[[], dict[str, Any]] = lambda: {}
        self._ids = itertools.count(1)
        self._tokens = itertools.count(1)
        self._out: list[Effect] = []
        self._now = 0.0

    # ------------------------------------------------------------ helpers

    def __repr__(self) -> str:
        return f"VehicleAgent({self.id}, {self.idle.value})"

    @property
    def busy(self) -> bool:
        return self.reactive is not None or self.manoeuvre is not None

    def _begin(self, now: float) -> None:
        self._out = []
        self._now = now

    def _end(self) -> list[Effect]:
        self._refresh_idle_timer()
        out, self._out = self._out, []
        return out

    def _note(self, kind: str, **detail: Any) -> None:
        self._out.append(Note(self.id, kind, detail))

    def _new_correlation(self) -> str:
        return f"{self.id}:{next(self._ids)}"

    def _set_timer(self, key: tuple[str, str], delay: float) -> None:
        deadline = round(self._now + delay, 9)
        self.timers[key] = self.timer_hook(self, key, deadline)

    def _refresh_idle_timer(self) -> None:
        # a waiting vehicle that nobody talks to falls back to its stable state
        key = (IDLE_TIMER, "")
        if not is_stable(self.idle) and not self.busy:
            if key not in self.timers:
                self.timers[key] = round(self._now + self.config.idle_timeout, 9)
        else:
            self.timers.pop(key, None)

    # ------------------------------------------------------------ primitives

    def execute_primitive(self, p: Primitive, inst: SubMachineInstance | None = None,
                          result: str | None = None) -> list[Effect]:
        """Apply one primitive to this vehicle; returns the effects it causes."""
        before = len(self._out)
        self._execute(p, inst, result)
        return self._out[before:]

    def _execute(self, p: Primitive, inst: SubMachineInstance | None, result: str | None) -> None:
        if self.idle not in ACTORS[p.op]:
            raise PrimitiveActorViolation(f"{p.op} is not allowed in {self.idle} on {self.id}")
        self._note("primitive", op=p.op.value, args=_plain(p.args), idle=self.idle.value,
                   correlation=inst.correlation if inst else None)
        op = p.op
        if op in (PrimitiveOp.SW, PrimitiveOp.USW, PrimitiveOp.BTL):
            self.idle = apply_state_primitive(op, self.idle)
        elif op is PrimitiveOp.BFV:
            self.idle = IdleState.FV
            # keep the last known member list: a later BPL may need it
            self.platoon.leader = None
            self._out.append(ClearTarget(self.id, "all"))
        elif op is PrimitiveOp.BPF:
            self.idle = IdleState.PF
            leader = p.get("leader")
            if leader is not None and leader != self.platoon.leader:
                self.platoon = PlatoonInfo(leader, [], self.platoon.d, self.platoon.D)
            self._out.append(ClearTarget(self.id, "MTP"))
        elif op is PrimitiveOp.BPL:
            pos = self.platoon.position(self.id)
            rear = self.platoon.members[pos:] if pos is not None else [self.id]
            self.idle = IdleState.PL
            self.platoon = PlatoonInfo(self.id, list(rear), self.platoon.d, self.platoon.D)
            self._out.append(ClearTarget(self.id, "all"))
            self._out.append(PlatoonUpdate(self.id, tuple(rear)))
        elif op is PrimitiveOp.SND:
            self._send(p, inst, result)
        elif op is PrimitiveOp.UPI:
            self._update_platoon(p)
        elif op in (PrimitiveOp.MTP, PrimitiveOp.SH):
            token = next(self._tokens)
            self.arrival_token = token
            params = tuple(sorted((k, v) for k, v in p.args.items()))
            self._out.append(SetTarget(self.id, op.value, params, token))
        # W: the wait itself is handled when the state is entered

    def _send(self, p: Primitive, inst: SubMachineInstance | None, result: str | None) -> None:
        kind = MessageKind(p.get("kind"))
        payload = dict(p.get("payload") or ())
        to = p.get("to")
        if kind is MessageKind.ABT and inst is not None:
            roles = {v: r for r, v in inst.participants.items()}
            payload = {"role": roles[to]}
            if result is not None:
                payload["result"] = result
        corr = inst.correlation if inst else self._new_correlation()
        msg = Message(kind, p.get("action") or (inst.sub.id if inst else ""), self.id, (to,), corr, payload)
        self._out.append(Send(msg))

    def _update_platoon(self, p: Primitive) -> None:
        members = list(self.platoon.members)
        what, vehicle = p.get("update"), p.get("vehicle")
        if what == "split_at":
            if vehicle == self.id:
                self._note("warning", reason="UPI split_at on self", vehicle=vehicle)
                return
            if vehicle not in members:
                # an earlier split moved it; whoever holds it now lets it go
                self._out.append(Detach(vehicle))
                return
            i = members.index(vehicle)
            rear = members[i:]
            members = members[:i]
            self._out.append(PlatoonUpdate(vehicle, tuple(rear)))
        elif what == "append":
            if vehicle not in members:
                members.append(vehicle)
        elif what == "insert_behind":
            if vehicle not in members:
                behind = p.get("behind")
                i = members.index(behind) + 1 if behind in members else len(members)
                members.insert(i, vehicle)
        elif what == "remove":
            if vehicle in members and vehicle != self.id:
                members.remove(vehicle)
        self.platoon = PlatoonInfo(self.id, members, self.platoon.d, self.platoon.D)
        self._out.append(PlatoonUpdate(self.id, tuple(members)))

    # ------------------------------------------------------------ instances

    def _feed(self, inst: SubMachineInstance, event: Event) -> None:
        before = inst.state
        try:
            outcome = inst.step(event)
        except StateMachineError as exc:
            self._note("warning", reason=exc.code, event=str(event), correlation=inst.correlation)
            return
        self._apply(inst, outcome, before, event)

    def _apply(self, inst: SubMachineInstance, outcome: StepOutcome, before: str | None, event: Event) -> None:
        for key in [k for k in self.timers if k[0] == inst.correlation]:
            del self.timers[key]
        self._note("transition", sub=inst.sub.id, role=inst.role, correlation=inst.correlation,
                   event=str(event), frm=before, to=outcome.entered + ([outcome.result] if outcome.result else []))
        for p in outcome.primitives:
            if p.op is not PrimitiveOp.W:
                self._execute(p, inst, outcome.result)
        if outcome.completed:
            self._conclude(inst, outcome.result)
            return
        state = inst.current()
        if any(t.on.kind == "timeout" for t in state.transitions):
            waits = [p for p in outcome.primitives if p.op is PrimitiveOp.W]
            w = waits[-1] if waits else None
            delay = w.get("timeout") if w is not None and w.get("timeout") is not None else self.config.default_timeout
            self._set_timer((inst.correlation, outcome.state), float(delay))
        if inst.awaits("decide"):
            accept = self._admit()
            self._feed(inst, Event.decide(accept))

    def _conclude(self, inst: SubMachineInstance, result: str) -> None:
        final = inst.sub.results[result][inst.role]
        if self.idle is not final:
            self._note("warning", reason="FINAL_STATE_MISMATCH", expected=final.value, actual=self.idle.value)
            self._conform(final, inst)
        self._note("result", sub=inst.sub.id, role=inst.role, correlation=inst.correlation, result=result,
                   idle=self.idle.value, manoeuvre=self.manoeuvre_id if inst.is_controlling else None)
        self.concluded[inst.correlation] = _Concluded(inst.sub, inst.role, result, dict(inst.participants))
        if inst.is_controlling:
            self.controlling.pop(inst.correlation, None)
            self._controlling_done(inst, result)
        else:
            if self.reactive is inst:
                self.reactive = None
            self.arrival_token = None
            if self.idle in (IdleState.FV, IdleState.PL):
                self._out.append(ClearTarget(self.id, "MTP"))

    def _conform(self, target: IdleState, inst: SubMachineInstance | None = None) -> None:
        for op in conform_path(self.idle, target):
            self._execute(Primitive.make(op), inst, None)

    def adopt_platoon(self, leader: VehicleId, members: list[VehicleId], now: float) -> list[Effect]:
        """React to platoon information broadcast by ``leader``.

        Only idle vehicles reconcile their role; a running sub-manoeuvre
        settles the role itself.  A follower named leader (its leader split
        in front of it and the order was lost) becomes one; a free vehicle
        named leader passes the platoon on to the next member; a follower
        its own leader no longer lists becomes free.
        """
        self._begin(now)
        idle = not self.busy
        if self.id in members:
            self.platoon = PlatoonInfo(leader, list(members), self.platoon.d, self.platoon.D)
            if leader == self.id and idle and self.idle is IdleState.PF:
                self._note("conform", frm=self.idle.value, to=IdleState.PL.value, reason="named leader")
                self._conform(IdleState.PL)
            elif leader == self.id and idle and self.idle is IdleState.FV and self._implied_abort():
                self._note("conform", frm=self.idle.value, to=IdleState.PL.value, reason="named leader")
                self._conform(IdleState.PL)
            elif leader == self.id and idle and self.idle is IdleState.FV:
                rest = [m for m in members if m != self.id]
                self.platoon = PlatoonInfo(None, [], self.platoon.d, self.platoon.D)
                if rest:
                    self._note("warning", reason="HANDOVER", to=rest[0])
                    self._out.append(PlatoonUpdate(rest[0], tuple(rest)))
        elif self.platoon.leader == leader and idle and self.idle is IdleState.PF:
            self._note("conform", frm=self.idle.value, to=IdleState.FV.value, reason="not listed")
            self.platoon = PlatoonInfo(None, [], self.platoon.d, self.platoon.D)
            self._conform(IdleState.FV)
        return self._end()

    def _implied_abort(self) -> bool:
        """Being named leader after a finished step means the leader gave up on it.

        If that step declares an abort ending that leaves our role leading,
        take it now; the ABT that says so is still on its way.
        """
        if not self.concluded:
            return False
        prior = self.concluded[next(reversed(self.concluded))]
        if prior.result != RS:
            return False
        for label, finals in prior.sub.results.items():
            if label != RS and finals.get(prior.role) is IdleState.PL:
                prior.result = label
                return True
        return False

    # ------------------------------------------------------------ leader side

    def _environment(self, bindings: dict[str, VehicleId]) -> dict[str, Any]:
        env: dict[str, Any] = {
            "d": self.platoon.d,
            "D": self.platoon.D,
            "lane": self.lane,
            "adjacent_lane": self.lane + 1,
            "leader": self.id,
            "self": self.id,
            "tail": self.platoon.tail or self.id,
            "size": len(self.platoon.members),
        }
        env.update(self.env())
        for role, v in bindings.items():
            pred = self.platoon.predecessor(v)
            if pred is not None:
                env[f"pred.{role}"] = pred
        env.update(bindings)
        return env

    def _admit(self) -> bool:
        policy = POLICIES.get(self.config.policy, default_admission)
        assert self.manoeuvre is not None
        # the check runs with the manoeuvre already registered, so "busy" is
        # decided before the request is admitted
        return bool(policy(self, self.manoeuvre.manoeuvre, dict(self.manoeuvre.bindings)))

    def _launch(self, action: NextAction, trigger: Event | None = None) -> None:
        assert self.manoeuvre is not None
        if action.kind == "terminate":
            self._finish_manoeuvre()
            return
        env = {**self._environment(self.manoeuvre.bindings), **self.manoeuvre.context}
        children = []
        for sub, parts, args in action.invocations:
            corr = trigger.message.correlation if trigger is not None and trigger.message else self._new_correlation()
            inst = SubMachineInstance(sub, sub.controlling.name, corr, parts, dict(env), self._now,
                                      args={k: resolve(v, env) for k, v in args.items()})
            children.append(inst)
        self.sim = wrap_sim(children) if len(children) > 1 else None
        self._note("step", manoeuvre=self.manoeuvre_id, step=action.step.id,
                   correlations=[c.correlation for c in children])
        for inst in children:
            self.controlling[inst.correlation] = inst
        for inst in children:
            self._feed(inst, trigger if trigger is not None else Event.lli())

    def _controlling_done(self, inst: SubMachineInstance, result: str) -> None:
        if self.manoeuvre is None:
            return
        if self.sim is not None:
            self.sim.record(inst, result)
            if not self.sim.completed:
                return
            outcome: Any = self.sim.outcome
            self.sim = None
        else:
            outcome = result
        try:
            nxt = advance_manoeuvre(self.manoeuvre, outcome)
        except StateMachineError as exc:
            self._note("warning", reason=exc.code, manoeuvre=self.manoeuvre_id)
            self._finish_manoeuvre()
            return
        self._launch(nxt)

    def _finish_manoeuvre(self) -> None:
        m = self.manoeuvre
        assert m is not None
        last_step, last = m.history[-1] if m.history else (None, None)
        self._note("manoeuvre-result", manoeuvre=self.manoeuvre_id, action=m.manoeuvre.id, step=last_step,
                   result=list(last) if isinstance(last, tuple) else last,
                   success=all(_is_success(r) for _, r in m.history),
                   history=[[s, list(r) if isinstance(r, tuple) else r] for s, r in m.history],
                   bindings=dict(m.bindings), started=m.started_at)
        self.manoeuvre = None
        self.manoeuvre_id = None

    def _start_manoeuvre(self, man: CompiledManoeuvre, bindings: dict[str, VehicleId]) -> None:
        self.manoeuvre_id = f"m:{self._new_correlation()}"
        inst = ManoeuvreInstance(man, self.id, dict(bindings), started_at=self._now)
        env = self._environment(inst.bindings)
        inst.context = {k: resolve(v, env) for k, v in man.let.items()}
        self.manoeuvre = inst
        self._note("manoeuvre-start", manoeuvre=self.manoeuvre_id, action=man.id, bindings=dict(inst.bindings))

    def initiate(self, manoeuvre: str, bindings: dict[str, VehicleId], now: float) -> list[Effect]:
        """Directly start ``manoeuvre`` from this leader (LLI decision)."""
        self._begin(now)
        if not is_stable(self.idle):
            raise InitiationError("UNSTABLE_IDLE", f"{self.id} is {self.idle}")
        if self.idle is not IdleState.PL:
            raise InitiationError("NOT_LEADER", f"{self.id} is {self.idle}")
        if self.busy:
            raise InitiationError("BUSY", f"{self.id} is already manoeuvring")
        man = self.behaviours.manoeuvre(manoeuvre)
        if man is None:
            raise InitiationError("UNKNOWN_MANOEUVRE", manoeuvre)
        missing = set(man.participant_roles) - set(bindings)
        if missing:
            raise InitiationError("MISSING_BINDING", f"unbound roles {sorted(missing)}")
        outsiders = [v for r, v in bindings.items() if r in man.participant_roles
                     and (v not in self.platoon.members or v == self.id)]
        if man.requestable or outsiders:
            raise InitiationError("NON_FOLLOWER_DIRECT_INIT",
                                  f"{manoeuvre} involves vehicles outside the platoon: {outsiders or 'requester'}")
        self._start_manoeuvre(man, bindings)
        assert self.manoeuvre is not None
        self._launch(self.manoeuvre.start())
        return self._end()

    def handle_request(self, req: Message, now: float | None = None) -> list[Effect]:
        if now is not None:
            self._begin(now)
        man = self.behaviours.requestable.get(req.action)
        bindings = dict(req.payload.get("participants") or {})
        reason = None
        if man is None:
            reason = "UNKNOWN_MANOEUVRE"
        elif self.idle is not IdleState.PL:
            reason = "NOT_LEADER"
        elif self.busy:
            reason = "BUSY"
        elif set(man.participant_roles) - set(bindings):
            reason = "MISSING_BINDING"
        if reason is not None:
            self._note("warning", reason=reason, request=req.correlation)
            self._out.append(Send(Message(MessageKind.NACK, _negotiation_id(man), self.id, (req.sender,),
                                          req.correlation)))
            return self._end() if now is not None else []
        assert man is not None
        self._start_manoeuvre(man, bindings)
        assert self.manoeuvre is not None
        self._launch(self.manoeuvre.start(), trigger=Event.msg(req))
        return self._end() if now is not None else []

    # ------------------------------------------------------------ participant side

    def request(self, manoeuvre: str, leader: VehicleId, bindings: dict[str, VehicleId], now: float) -> list[Effect]:
        """LLI asks this vehicle to request ``manoeuvre`` from ``leader``."""
        self._begin(now)
        if not is_stable(self.idle):
            raise InitiationError("UNSTABLE_IDLE", f"{self.id} is {self.idle}")
        if self.busy:
            raise InitiationError("BUSY", f"{self.id} is already manoeuvring")
        man = self.behaviours.requestable.get(manoeuvre)
        if man is None:
            raise InitiationError("UNKNOWN_MANOEUVRE", f"{manoeuvre} cannot be requested")
        first = man.steps[man.initial].invocations[0]
        sub = man.subs[first.action]
        role = next(r for r in sub.reactive if r.trigger is not None and r.trigger.kind == "lli")
        if role.entry_state is not self.idle:
            raise InitiationError("ENTRY_STATE_MISMATCH", f"{self.id} is {self.idle}, needs {role.entry_state}")
        parts = {sub.controlling.name: leader, role.name: self.id}
        ctx = {"manoeuvre": manoeuvre, "participants": dict(bindings)}
        inst = SubMachineInstance(sub, role.name, self._new_correlation(), parts, ctx, now)
        self.reactive = inst
        self._note("request", manoeuvre=manoeuvre, leader=leader, correlation=inst.correlation,
                   bindings=dict(bindings))
        self._feed(inst, Event.lli())
        return self._end()

    def handle_message(self, msg: Message, now: float) -> list[Effect]:
        self._begin(now)
        if self.id not in msg.receivers:
            self._note("warning", reason="NOT_ADDRESSED", message=msg.label)
            return self._end()
        corr = msg.correlation
        if corr in self.controlling:
            self._feed(self.controlling[corr], Event.msg(msg))
        elif self.reactive is not None and self.reactive.correlation == corr:
            self._feed(self.reactive, Event.msg(msg))
        elif msg.kind is MessageKind.REQ:
            self.handle_request(msg)
        elif msg.kind is MessageKind.TMPL_SPLIT:
            self._temporary_split(msg)
        elif msg.kind is MessageKind.ABT:
            self._late_abort(msg)
        elif corr in self.concluded and msg.kind is MessageKind.DN:
            self._late_done(msg)
        elif msg.kind is MessageKind.ORD and self._dispatch(msg):
            pass
        else:
            self._note("warning", reason="UNEXPECTED_MESSAGE", message=msg.label, correlation=corr,
                       idle=self.idle.value)
        return self._end()

    def _dispatch(self, msg: Message) -> bool:
        entry = self.behaviours.reactive.get((msg.action, msg.kind))
        if entry is None or self.reactive is not None or self.manoeuvre is not None:
            return False
        sub, role = entry
        if role.entry_state is not self.idle:
            return False
        parts = {sub.controlling.name: msg.sender, role.name: self.id}
        inst = SubMachineInstance(sub, role.name, msg.correlation, parts, {}, self._now)
        self.reactive = inst
        self._feed(inst, Event.msg(msg))
        return True

    def _temporary_split(self, msg: Message) -> None:
        if self.idle is not IdleState.TPL:
            self._note("warning", reason="UNEXPECTED_MESSAGE", message=msg.label)
            return
        inst = self.reactive
        if inst is not None:
            for key in [k for k in self.timers if k[0] == inst.correlation]:
                del self.timers[key]
            self.reactive = None
            self._note("result", sub=inst.sub.id, role=inst.role, correlation=inst.correlation, result=None,
                       idle=IdleState.PL.value, manoeuvre=None)
        self._execute(Primitive.make(PrimitiveOp.BPL), inst, None)
        self.arrival_token = None

    def _late_abort(self, msg: Message) -> None:
        # the sender ended that sub-manoeuvre in an abort we did not see in
        # time; take the end state it declares for our role
        if self.busy:
            self._note("warning", reason="LATE_ABORT_WHILE_BUSY", correlation=msg.correlation)
            return
        sub = self.behaviours.subs.get(msg.action)
        result, role = msg.payload.get("result"), msg.payload.get("role")
        if sub is None or result not in sub.results or role not in sub.results[result]:
            self._note("warning", reason="UNEXPECTED_MESSAGE", message=msg.label, correlation=msg.correlation)
            return
        target = sub.results[result][role]
        self._note("conform", sub=sub.id, role=role, correlation=msg.correlation, result=result,
                   frm=self.idle.value, to=target.value)
        self._conform(target)
        prior = self.concluded.get(msg.correlation)
        if prior is not None:
            prior.result = result
        if self.idle in (IdleState.FV, IdleState.PL):
            self._out.append(ClearTarget(self.id, "MTP"))

    def _late_done(self, msg: Message) -> None:
        prior = self.concluded[msg.correlation]
        if prior.result == RS:
            return
        roles = {v: r for r, v in prior.participants.items()}
        role = roles.get(msg.sender)
        if role is None:
            return
        # the participant finished after we gave up; repeat the abort
        self._out.append(Send(Message(MessageKind.ABT, prior.sub.id, self.id, (msg.sender,), msg.correlation,
                                      {"result": prior.result, "role": role})))

    def handle_arrived(self, token: int, now: float) -> list[Effect]:
        self._begin(now)
        inst = self.reactive
        if inst is not None and token == self.arrival_token and inst.awaits("arrived"):
            self._feed(inst, Event.arrived())
        return self._end()

    def tick_timeouts(self, now: float) -> list[Effect]:
        self._begin(now)
        due = sorted((d, k) for k, d in self.timers.items() if d <= now + 1e-9)
        for _, key in due:
            if key not in self.timers:
                continue
            del self.timers[key]
            corr, state = key
            if corr == IDLE_TIMER:
                self._idle_timeout()
                continue
            inst = self.controlling.get(corr)
            if inst is None and self.reactive is not None and self.reactive.correlation == corr:
                inst = self.reactive
            if inst is not None and inst.state == state:
                self._feed(inst, Event.timeout())
        return self._end()

    def _idle_timeout(self) -> None:
        if is_stable(self.idle) or self.busy:
            return
        target = IdleState.PL if self.idle is IdleState.TPL else apply_state_primitive(PrimitiveOp.USW, self.idle)
        self._note("warning", reason="IDLE_TIMEOUT", frm=self.idle.value, to=target.value)
        self._conform(target)
        if self.idle in (IdleState.FV, IdleState.PL):
            self._out.append(ClearTarget(self.id, "MTP"))

    @property
    def next_deadline(self) -> float | None:
        return min(self.timers.values()) if self.timers else None


def _is_success(result: Any) -> bool:
    if isinstance(result, tuple):
        return all(r == RS for r in result)
    return result == RS


def _negotiation_id(man: CompiledManoeuvre | None) -> str:
    if man is None:
        return "NEGOTIATE"
    return man.steps[man.initial].invocations[0].action


def _plain(args: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for k, v in args.items():
        if k == "payload":
            v = {pk: pv for pk, pv in v}
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


__all__ = [
    "AgentConfig",
    "ClearTarget",
    "Effect",
    "InitiationError",
    "Note",
    "POLICIES",
    "PlatoonInfo",
    "Detach",
    "PlatoonUpdate",
    "PrimitiveActorViolation",
    "Send",
    "SetTarget",
    "VehicleAgent",
    "default_admission",
]
