"""Static checks over compiled behaviours.

Sub-manoeuvres are explored as the product of all their halves, connected by
lossless FIFO channels, one per ordered pair of roles.  Timeouts, arrivals and
admission decisions are free environment events that may happen whenever the
current state listens for them.  A configuration is terminal when every half
has concluded and every channel is empty.

Manoeuvres are checked by composing the outcome sets of their steps along
the step graph; a SIM step contributes the Cartesian product of its children.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Iterable, NamedTuple, Union

from .core import RS, IdleState, MessageKind, PrimitiveOp, is_stable
from .mdl import TERMINATE, CompiledManoeuvre, CompiledSubManoeuvre, Diagnostic, EventPattern

MAX_STATES = 1_000_000

Behaviour = Union[CompiledSubManoeuvre, CompiledManoeuvre]


class StateExplosion(Exception):
    code = "STATE_EXPLOSION"


class Outcome(NamedTuple):
    """One way a behaviour can end.

    ``result`` is a label, or a tuple of labels for a SIM step; ``states``
    maps every role to its final idle state; ``step`` names the terminating
    step of a manoeuvre and is ``None`` for sub-manoeuvres.
    """

    result: Any
    states: tuple[tuple[str, IdleState], ...]
    step: str | None = None

    @property
    def state_map(self) -> dict[str, IdleState]:
        return dict(self.states)

    def to_dict(self) -> dict[str, Any]:
        return {
            "result": list(self.result) if isinstance(self.result, tuple) else self.result,
            "states": {r: s.value for r, s in self.states},
            "step": self.step,
        }


class OutcomeSet(frozenset):
    """A frozenset of :class:`Outcome` that also carries exploration findings."""

    diagnostics: tuple[Diagnostic, ...] = ()
    explored: int = 0

    def __new__(cls, items: Iterable[Outcome] = (), diagnostics: Iterable[Diagnostic] = (), explored: int = 0):
        obj = super().__new__(cls, items)
        obj.diagnostics = tuple(diagnostics)
        obj.explored = explored
        return obj


# ---------------------------------------------------------------- product of halves

class _Msg(NamedTuple):
    kind: MessageKind
    action: str | None
    result: str | None


def _matches(p: EventPattern, m: _Msg) -> bool:
    return p.kind == "msg" and p.msg_kind is m.kind and (p.action is None or m.action is None or p.action == m.action)


_DONE = "done"


@dataclass
class _Product:
    sub: CompiledSubManoeuvre
    roles: list[str]
    pairs: list[tuple[str, str]]

    @classmethod
    def of(cls, sub: CompiledSubManoeuvre) -> "_Product":
        roles = [r.name for r in sub.doc.roles]
        pairs = [(a, b) for a in roles for b in roles if a != b]
        return cls(sub, roles, pairs)

    def trigger(self, role: str) -> EventPattern:
        if role == self.sub.controlling.name:
            return self.sub.controlling_trigger
        t = self.sub.role(role).trigger
        assert t is not None
        return t

    def enter(self, role: str, target: str) -> tuple[Any, list[tuple[str, _Msg]], list[str]]:
        """Follow done-chains from ``target``; returns the new local state,
        the messages sent on the way and the states passed through."""
        table = self.sub.states[role]
        sends: list[tuple[str, str | None, MessageKind]] = []
        passed: list[str] = []
        local: Any
        while True:
            if target not in table:
                local = (_DONE, target)
                break
            passed.append(target)
            st = table[target]
            for p in st.primitives:
                if p.op is PrimitiveOp.SND:
                    action = p.get("action") or self.sub.id
                    if isinstance(action, str) and action.startswith("$"):
                        action = None
                    sends.append((p.get("to"), action, MessageKind(p.get("kind"))))
            done = [t for t in st.transitions if t.on.kind == "done"]
            if not done:
                local = target
                break
            target = done[0].to
        label = local[1] if isinstance(local, tuple) else None
        msgs = [(to, _Msg(kind, action, label if kind is MessageKind.ABT else None)) for to, action, kind in sends]
        return local, msgs, passed

    def initial(self) -> tuple:
        return (tuple(None for _ in self.roles), tuple(() for _ in self.pairs))

    def successors(self, config: tuple, fired: set, unexpected: list) -> list[tuple]:
        locals_, chans = config
        out = []
        # an admission decision is taken the moment its state is entered
        for i, role in enumerate(self.roles):
            loc = locals_[i]
            if isinstance(loc, str) and any(t.on.kind == "decide" for t in self.sub.states[role][loc].transitions):
                urgent = [(i, role, loc)]
                break
        else:
            urgent = []

        def apply(i: int, new_local: Any, msgs: list[tuple[str, _Msg]], consume: int | None = None) -> tuple:
            ls = list(locals_)
            ls[i] = new_local
            cs = [list(c) for c in chans]
            if consume is not None:
                cs[consume].pop(0)
            for to, m in msgs:
                cs[self.pairs.index((self.roles[i], to))].append(m)
            return (tuple(ls), tuple(tuple(c) for c in cs))

        for i, role, loc in urgent:
            st = self.sub.states[role][loc]
            for k, t in enumerate(st.transitions):
                if t.on.kind == "decide":
                    fired.add((role, loc, k))
                    new, msgs, _ = self.enter(role, t.to)
                    out.append(apply(i, new, msgs))
        if urgent:
            return out

        for i, role in enumerate(self.roles):
            loc = locals_[i]
            if loc is None:
                trig = self.trigger(role)
                if trig.kind == "lli":
                    new, msgs, _ = self.enter(role, self.sub.role(role).initial)
                    out.append(apply(i, new, msgs))
            elif isinstance(loc, str):
                st = self.sub.states[role][loc]
                for k, t in enumerate(st.transitions):
                    if t.on.kind in ("timeout", "arrived", "decide"):
                        fired.add((role, loc, k))
                        new, msgs, _ = self.enter(role, t.to)
                        out.append(apply(i, new, msgs))

        for c, (src, dst) in enumerate(self.pairs):
            if not chans[c]:
                continue
            m = chans[c][0]
            j = self.roles.index(dst)
            loc = locals_[j]
            if loc is None:
                if _matches(self.trigger(dst), m):
                    new, msgs, _ = self.enter(dst, self.sub.role(dst).initial)
                    out.append(apply(j, new, msgs, consume=c))
                else:
                    unexpected.append((dst, "entry", m, src))
                    out.append(apply(j, loc, [], consume=c))
            elif isinstance(loc, str):
                st = self.sub.states[dst][loc]
                hit = next((k for k, t in enumerate(st.transitions) if _matches(t.on, m)), None)
                if hit is not None:
                    fired.add((dst, loc, hit))
                    new, msgs, _ = self.enter(dst, st.transitions[hit].to)
                    out.append(apply(j, new, msgs, consume=c))
                else:
                    unexpected.append((dst, loc, m, src))
                    out.append(apply(j, loc, [], consume=c))
            else:
                label = loc[1]
                new_local: Any = loc
                reply: list[tuple[str, _Msg]] = []
                if m.kind is MessageKind.ABT and m.result in self.sub.results:
                    # a late abort: the finished half conforms to it
                    new_local = (_DONE, m.result)
                elif (m.kind is MessageKind.DN and dst == self.sub.controlling.name and label != RS):
                    # a late completion report is answered with the abort again
                    reply = [(src, _Msg(MessageKind.ABT, self.sub.id, label))]
                out.append(apply(j, new_local, reply, consume=c))
        return out

    def terminal(self, config: tuple) -> bool:
        locals_, chans = config
        return all(isinstance(l, tuple) for l in locals_) and not any(chans)


@dataclass
class _Exploration:
    outcomes: frozenset[Outcome]
    diagnostics: list[Diagnostic]
    explored: int


def _explore_sub(sub: CompiledSubManoeuvre, bound: int = MAX_STATES) -> _Exploration:
    prod = _Product.of(sub)
    start = prod.initial()
    seen = {start: 0}
    order = [start]
    edges: list[list[int]] = [[]]
    fired: set = set()
    unexpected: list = []
    queue = deque([start])
    diags: list[Diagnostic] = []
    outcomes: set[Outcome] = set()
    stuck: list[tuple] = []
    mismatched: set[tuple] = set()

    def diag(severity: str, rule: str, path: str, msg: str) -> None:
        d = Diagnostic(severity, rule, path, msg, sub.id)
        if d not in diags:
            diags.append(d)

    while queue:
        cfg = queue.popleft()
        idx = seen[cfg]
        succ = prod.successors(cfg, fired, unexpected)
        if prod.terminal(cfg):
            labels = {l[1] for l in cfg[0]}
            if len(labels) == 1:
                (lab,) = labels
                outcomes.add(Outcome(lab, tuple((r, sub.results[lab][r]) for r in prod.roles)))
            else:
                mismatched.add(tuple(l[1] for l in cfg[0]))
            continue
        if not succ:
            stuck.append(cfg)
        for nxt in succ:
            if nxt not in seen:
                if len(seen) >= bound:
                    raise StateExplosion(f"{sub.id}: more than {bound} product states")
                seen[nxt] = len(order)
                order.append(nxt)
                edges.append([])
                queue.append(nxt)
            edges[idx].append(seen[nxt])

    for labels in sorted(mismatched):
        diag("error", "MISMATCHED_RESULT", "$.results",
             "halves can conclude with different results: "
             + ", ".join(f"{r}={lab}" for r, lab in zip(prod.roles, labels)))
    for cfg in stuck:
        waiting = [f"{r} in {l}" for r, l in zip(prod.roles, cfg[0]) if not isinstance(l, tuple)]
        diag("error", "DEADLOCK_RISK", "$.states", "no event can move " + ", ".join(waiting or ["any role"]))
    for dst, loc, m, src in unexpected:
        label = m.kind.value + (f"/{m.action}" if m.action else "")
        diag("error", "DEADLOCK_RISK", f"$.states.{dst}.{loc}",
             f"{label} from {src} can reach {dst} in {loc}, which does not accept it")
    # every message a half waits for must be sent on some co-reachable path
    for role, table in sub.states.items():
        for sid, st in table.items():
            for k, t in enumerate(st.transitions):
                if (role, sid, k) in fired:
                    continue
                path = f"$.states.{role}.{sid}.transitions[{k}]"
                if t.on.kind == "msg":
                    diag("error", "DEADLOCK_RISK", path,
                         f"{role} waits in {sid} for {t.on} but no reachable run sends it")
                elif t.on.kind in ("timeout", "arrived", "decide"):
                    # the state itself is never entered; the validator reports that
                    pass
    # progress: every configuration must be able to reach a terminal one
    good = {i for i, c in enumerate(order) if prod.terminal(c)}
    rev: list[list[int]] = [[] for _ in order]
    for a, bs in enumerate(edges):
        for b in bs:
            rev[b].append(a)
    frontier = deque(good)
    while frontier:
        b = frontier.popleft()
        for a in rev[b]:
            if a not in good:
                good.add(a)
                frontier.append(a)
    if len(good) < len(order) and not stuck:
        diag("error", "DEADLOCK_RISK", "$.states", f"{len(order) - len(good)} reachable configurations cannot finish")
    for lab in sub.labels:
        if not any(o.result == lab for o in outcomes):
            diag("warning", "UNREACHABLE_RESULT", "$.results", f"result {lab} is never produced")
    return _Exploration(frozenset(outcomes), diags, len(order))


_CACHE: dict[int, tuple[CompiledSubManoeuvre, _Exploration]] = {}


def _sub_exploration(sub: CompiledSubManoeuvre) -> _Exploration:
    hit = _CACHE.get(id(sub))
    if hit is not None and hit[0] is sub:
        return hit[1]
    ex = _explore_sub(sub)
    _CACHE[id(sub)] = (sub, ex)
    return ex


# ---------------------------------------------------------------- manoeuvres

def _explore_manoeuvre(man: CompiledManoeuvre) -> _Exploration:
    roles = [r.name for r in man.doc.roles]
    entry = {r.name: r.entry_state for r in man.doc.roles}
    diags: list[Diagnostic] = []
    outcomes: set[Outcome] = set()
    explored = 0
    start = (man.initial, tuple(entry[r] for r in roles))
    seen = {start}
    stack = [start]
    while stack:
        step_id, states = stack.pop()
        explored += 1
        step = man.steps[step_id]
        per_child = []
        for inv in step.invocations:
            sub = man.subs[inv.action]
            ex = _sub_exploration(sub)
            explored += ex.explored
            mapping = {sub.controlling.name: man.leader_role, **dict(inv.participants)}
            current = dict(zip(roles, states))
            for sub_role, man_role in mapping.items():
                want = sub.role(sub_role).entry_state
                if current[man_role] is not want:
                    diags.append(Diagnostic("error", "ENTRY_STATE_MISMATCH", f"$.steps.{step_id}",
                                            f"{man_role} is {current[man_role].value} but {sub.id} expects "
                                            f"{want.value}", man.id))
            per_child.append([(o.result, {mapping[r]: s for r, s in o.states}) for o in sorted(ex.outcomes, key=repr)])
        for combo in itertools.product(*per_child):
            label: Any = combo[0][0] if not step.sim else tuple(c[0] for c in combo)
            new = dict(zip(roles, states))
            for _, finals in combo:
                new.update(finals)
            to = step.next_for(label)
            if to is None:
                diags.append(Diagnostic("error", "UNDECLARED_RESULT", f"$.steps.{step_id}.next",
                                        f"{label} has no successor", man.id))
                continue
            tup = tuple(new[r] for r in roles)
            if to == TERMINATE:
                outcomes.add(Outcome(label, tuple(zip(roles, tup)), step_id))
                continue
            key = (to, tup)
            if key not in seen:
                if len(seen) >= MAX_STATES:
                    raise StateExplosion(f"{man.id}: more than {MAX_STATES} step configurations")
                seen.add(key)
                stack.append(key)
    return _Exploration(frozenset(outcomes), _dedupe(diags), explored)


def _dedupe(diags: list[Diagnostic]) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    for d in diags:
        if d not in out:
            out.append(d)
    return out


# ---------------------------------------------------------------- public checks

def enumerate_outcomes(behaviour: Behaviour) -> OutcomeSet:
    """Every reachable ending of ``behaviour``.

    Raises :class:`StateExplosion` when the product grows beyond
    ``MAX_STATES`` configurations.  Results that are declared but never
    produced come back as ``UNREACHABLE_RESULT`` warnings on the returned set.
    """
    if isinstance(behaviour, CompiledSubManoeuvre):
        ex = _sub_exploration(behaviour)
        warns = [d for d in ex.diagnostics if d.rule == "UNREACHABLE_RESULT"]
    else:
        ex = _explore_manoeuvre(behaviour)
        warns = []
    return OutcomeSet(ex.outcomes, warns, ex.explored)


def check_stability(behaviour: Behaviour) -> list[Diagnostic]:
    """Abort results and manoeuvre terminations must leave every role stable;
    no result may leave a role as temporary leader."""
    out: list[Diagnostic] = []
    subs = [behaviour] if isinstance(behaviour, CompiledSubManoeuvre) else list(behaviour.subs.values())
    for sub in subs:
        for label, finals in sub.results.items():
            for role, st in sorted(finals.items()):
                if (label != RS and not is_stable(st)) or st is IdleState.TPL:
                    out.append(Diagnostic("error", "STABILITY_TERMINAL_UNSTABLE", f"$.results.{label}.{role}",
                                          f"{label} leaves {role} in {st.value}", sub.id))
    if isinstance(behaviour, CompiledManoeuvre):
        for o in sorted(_explore_manoeuvre(behaviour).outcomes, key=repr):
            for role, st in o.states:
                if not is_stable(st):
                    out.append(Diagnostic("error", "STABILITY_TERMINAL_UNSTABLE", f"$.steps.{o.step}",
                                          f"terminating after {o.step} with {o.result} leaves {role} in {st.value}",
                                          behaviour.id))
    return _dedupe(out)


def check_synchronisation(behaviour: Behaviour) -> list[Diagnostic]:
    """Message and wait pairing between halves, deadlocks and progress."""
    if isinstance(behaviour, CompiledSubManoeuvre):
        return [d for d in _sub_exploration(behaviour).diagnostics if d.rule != "UNREACHABLE_RESULT"]
    out = []
    for sub in behaviour.subs.values():
        out.extend(d for d in _sub_exploration(sub).diagnostics if d.rule != "UNREACHABLE_RESULT")
    out.extend(d for d in _explore_manoeuvre(behaviour).diagnostics)
    return _dedupe(out)


def check_coverage(behaviour: Behaviour) -> list[Diagnostic]:
    """Completeness: every declared transition can fire in some run."""
    subs = [behaviour] if isinstance(behaviour, CompiledSubManoeuvre) else list(behaviour.subs.values())
    out = []
    for sub in subs:
        prod = _Product.of(sub)
        fired: set = set()
        seen = {prod.initial()}
        queue = deque(seen)
        while queue:
            cfg = queue.popleft()
            for nxt in prod.successors(cfg, fired, []):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        for role, table in sub.states.items():
            for sid, st in table.items():
                for k, t in enumerate(st.transitions):
                    if t.on.kind != "done" and (role, sid, k) not in fired:
                        out.append(Diagnostic("warning", "UNCOVERED_TRANSITION",
                                              f"$.states.{role}.{sid}.transitions[{k}]",
                                              f"{t.on} -> {t.to} never fires", sub.id))
    return out


def verify(behaviour: Behaviour, coverage: bool = False) -> list[Diagnostic]:
    """All checks together, errors first."""
    try:
        diags = check_stability(behaviour) + check_synchronisation(behaviour)
        diags += list(enumerate_outcomes(behaviour).diagnostics)
        if coverage:
            diags += check_coverage(behaviour)
    except StateExplosion as exc:
        return [Diagnostic("error", "STATE_EXPLOSION", "$", str(exc), behaviour.id)]
    diags = _dedupe(diags)
    return sorted(diags, key=lambda d: d.severity != "error")


__all__ = [
    "MAX_STATES",
    "Outcome",
    "OutcomeSet",
    "StateExplosion",
    "check_coverage",
    "check_stability",
    "check_synchronisation",
    "enumerate_outcomes",
    "verify",
]
