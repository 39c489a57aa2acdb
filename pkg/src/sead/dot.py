"""Graphviz DOT rendering of compiled behaviours."""
from __future__ import annotations

from .mdl import TERMINATE, CompiledManoeuvre, CompiledSubManoeuvre


def _q(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def _label(on) -> str:
    if isinstance(on, tuple):
        return "(" + ", ".join(on) + ")"
    return str(on)


def manoeuvre_dot(man: CompiledManoeuvre) -> str:
    lines = [f"digraph {_q(man.id)} {{", "  rankdir=LR;", "  node [shape=box];"]
    for sid, step in man.steps.items():
        what = " || ".join(inv.action for inv in step.invocations)
        who = ", ".join(f"{a}={b}" for inv in step.invocations for a, b in inv.participants)
        shape = ", peripheries=2" if sid == man.initial else ""
        lines.append(f"  {_q(sid)} [label={_q(f'{sid}: {what} [{who}]')}{shape}];")
    if any(to == TERMINATE for s in man.steps.values() for _, to in s.next):
        lines.append(f"  {_q(TERMINATE)} [shape=doublecircle];")
    for sid, step in man.steps.items():
        for on, to in step.next:
            lines.append(f"  {_q(sid)} -> {_q(to)} [label={_q(_label(on))}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def sub_manoeuvre_dot(sub: CompiledSubManoeuvre) -> str:
    lines = [f"digraph {_q(sub.id)} {{", "  rankdir=LR;", "  node [shape=box];"]
    for label, finals in sub.results.items():
        text = label + "\n" + " ".join(f"{r}={s.value}" for r, s in sorted(finals.items()))
        lines.append(f"  {_q(label)} [shape=doublecircle, label={_q(text)}];")
    for role, table in sub.states.items():
        lines.append(f"  subgraph {_q('cluster_' + role)} {{")
        lines.append(f"    label={_q(role)};")
        entry = f"{role}.entry"
        lines.append(f"    {_q(entry)} [shape=point];")
        for sid, st in table.items():
            prims = ", ".join(str(p) for p in st.primitives)
            text = sid + "\n" + prims if prims else sid
            lines.append(f"    {_q(f'{role}.{sid}')} [label={_q(text)}];")
        lines.append("  }")
        r = sub.role(role)
        trigger = sub.controlling_trigger if role == sub.controlling.name else r.trigger
        lines.append(f"  {_q(entry)} -> {_q(f'{role}.{r.initial}')} [label={_q(str(trigger))}];")
        for sid, st in table.items():
            for t in st.transitions:
                dst = f"{role}.{t.to}" if t.to in table else t.to
                lines.append(f"  {_q(f'{role}.{sid}')} -> {_q(dst)} [label={_q(str(t.on))}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_dot(behaviour: CompiledManoeuvre | CompiledSubManoeuvre) -> str:
    if isinstance(behaviour, CompiledManoeuvre):
        return manoeuvre_dot(behaviour)
    return sub_manoeuvre_dot(behaviour)


__all__ = ["manoeuvre_dot", "sub_manoeuvre_dot", "to_dot"]
