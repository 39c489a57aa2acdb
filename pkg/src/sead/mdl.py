"""Manoeuvre Design Language: JSON documents describing (sub-)manoeuvres.

A document is one JSON object.  Sub-manoeuvres carry per-role state tables
and a result table; manoeuvres carry a step graph over sub-manoeuvre
invocations.  ``parse`` and ``serialize`` are exact inverses on canonical
text; ``validate`` reports structural problems as :class:`Diagnostic` values
and ``compile`` links a valid document against a :class:`Registry`.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping

import jsonschema

from .core import (
    RS,
    IdleState,
    MessageKind,
    Primitive,
    PrimitiveOp,
    apply_state_primitive,
    is_stable,
    primitive_allowed,
)

MDL_VERSION = "1"
TERMINATE = "TERMINATE"
SUB = "sub-manoeuvre"
MAN = "manoeuvre"
CONTROLLING = "controlling"
REACTIVE = "reactive"

_LABEL_RE = r"^(RS|RA[1-9][0-9]*)$"
_NAME_RE = r"^[A-Za-z][A-Za-z0-9_]*$"
_ACTION_RE = r"^[A-Z][A-Z0-9_]*$"
_KINDS = [k.value for k in MessageKind]
_IDLE = [s.value for s in IdleState]
_EXPR = {"type": "string", "pattern": r"^-?([0-9]+(\.[0-9]+)?\*)?\$[A-Za-z_][A-Za-z0-9_.]*$"}
_NUM_OR_EXPR = {"anyOf": [{"type": "number"}, _EXPR]}
_SCALAR = {
    "anyOf": [
        {"type": ["number", "string", "boolean"]},
        {"type": "array", "items": {"type": "string"}},
    ]
}


class MdlError(Exception):
    """Base class for MDL parse and compile failures."""


class MdlSyntaxError(MdlError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class MdlSchemaError(MdlError):
    def __init__(self, msg: str, path: str, rule: str = "SCHEMA"):
        super().__init__(f"{path}: {msg}")
        self.path = path
        self.rule = rule


class MdlCompileError(MdlError):
    def __init__(self, diagnostics: list["Diagnostic"]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics if d.severity == "error"))


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    rule: str
    path: str
    message: str
    document: str = ""

    def __str__(self) -> str:
        where = f"{self.document}:{self.path}" if self.document else self.path
        return f"{self.severity.upper()} {self.rule} at {where}: {self.message}"

    def to_dict(self) -> dict[str, str]:
        return {
            "severity": self.severity,
            "rule": self.rule,
            "path": self.path,
            "message": self.message,
            "document": self.document,
        }


def errors(diags: Iterable[Diagnostic]) -> list[Diagnostic]:
    return [d for d in diags if d.severity == "error"]


# --------------------------------------------------------------------------
# JSON schema

def _pattern_schema(allowed: list[str]) -> dict:
    props = {
        "msg": {"type": "string", "pattern": r"^(" + "|".join(_KINDS) + r")(/[A-Z][A-Z0-9_]*)?$"},
        "timeout": {"const": True},
        "arrived": {"const": True},
        "done": {"const": True},
        "decide": {"enum": ["accept", "reject"]},
        "lli": {"const": True},
    }
    return {
        "type": "object",
        "properties": {k: props[k] for k in allowed},
        "additionalProperties": False,
        "minProperties": 1,
        "maxProperties": 1,
    }


def _primitive_schema() -> dict:
    per_op: dict[str, dict] = {
        "MTP": {"target": {"type": "string"}, "offset": _NUM_OR_EXPR,
                "lane": {"anyOf": [{"type": "integer"}, _EXPR]}},
        "SH": {"time": _NUM_OR_EXPR, "space": _NUM_OR_EXPR},
        "BFV": {}, "BPL": {}, "BTL": {}, "SW": {}, "USW": {},
        "BPF": {"leader": {"type": "string"}},
        "W": {"timeout": _NUM_OR_EXPR},
        "SND": {
            "kind": {"enum": _KINDS},
            "to": {"type": "string", "pattern": _NAME_RE},
            "action": {"type": "string"},
            "payload": {"type": "object", "additionalProperties": _SCALAR},
        },
        "UPI": {
            "update": {"enum": ["split_at", "append", "insert_behind", "remove"]},
            "vehicle": {"type": "string"},
            "behind": {"type": "string"},
        },
    }
    required = {"SND": ["kind", "to"], "UPI": ["update", "vehicle"]}
    branches = []
    for op, props in per_op.items():
        then: dict[str, Any] = {
            "properties": {"op": {"const": op}, **props},
            "additionalProperties": False,
        }
        if op in required:
            then["required"] = required[op]
        if op == "SH":
            then["oneOf"] = [{"required": ["time"]}, {"required": ["space"]}]
        branches.append({"if": {"properties": {"op": {"const": op}}}, "then": then})
    return {
        "type": "object",
        "required": ["op"],
        "properties": {"op": {"enum": list(per_op)}},
        "allOf": branches,
    }


def _build_schema() -> dict:
    state = {
        "type": "object",
        "required": ["primitives", "transitions"],
        "additionalProperties": False,
        "properties": {
            "primitives": {"type": "array", "items": {"$ref": "#/$defs/primitive"}},
            "transitions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["on", "to"],
                    "additionalProperties": False,
                    "properties": {
                        "on": _pattern_schema(["msg", "timeout", "arrived", "done", "decide"]),
                        "to": {"type": "string", "minLength": 1},
                    },
                },
            },
            "note": {"type": "string"},
        },
    }
    invocation = {
        "type": "object",
        "required": ["action", "participants"],
        "additionalProperties": False,
        "properties": {
            "action": {"type": "string", "pattern": _ACTION_RE},
            "participants": {"type": "object", "additionalProperties": {"type": "string"}},
            "args": {"type": "object", "additionalProperties": _SCALAR},
        },
    }
    step = {
        "type": "object",
        "required": ["id", "invoke", "next"],
        "additionalProperties": False,
        "properties": {
            "id": {"type": "string", "pattern": _NAME_RE},
            "invoke": {
                "anyOf": [
                    {"type": "string", "pattern": _ACTION_RE},
                    {
                        "type": "object",
                        "required": ["sim"],
                        "additionalProperties": False,
                        "properties": {"sim": {"type": "array", "items": invocation}},
                    },
                ]
            },
            "participants": {"type": "object", "additionalProperties": {"type": "string"}},
            "args": {"type": "object", "additionalProperties": _SCALAR},
            "next": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["on", "to"],
                    "additionalProperties": False,
                    "properties": {
                        "on": {
                            "anyOf": [
                                {"type": "string", "pattern": _LABEL_RE},
                                {"type": "array", "items": {"type": "string", "pattern": _LABEL_RE}},
                            ]
                        },
                        "to": {"type": "string"},
                    },
                },
            },
            "note": {"type": "string"},
        },
    }
    role = {
        "type": "object",
        "required": ["name", "entry_state", "part"],
        "additionalProperties": False,
        "properties": {
            "name": {"type": "string", "pattern": _NAME_RE},
            "entry_state": {"enum": _IDLE},
            "part": {"enum": [CONTROLLING, REACTIVE]},
            "trigger": _pattern_schema(["msg", "lli"]),
            "initial": {"type": "string"},
        },
    }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": "https://sead.invalid/mdl-1.schema.json",
        "title": "Manoeuvre Design Language document",
        "type": "object",
        "required": ["mdl-version", "id", "kind", "version", "roles"],
        "additionalProperties": False,
        "properties": {
            "mdl-version": {"type": "string", "pattern": r"^[0-9]+(\.[0-9]+)*$"},
            "id": {"type": "string", "pattern": _ACTION_RE},
            "kind": {"enum": [SUB, MAN]},
            "version": {"type": "string"},
            "description": {"type": "string"},
            "digest": {"type": "string", "pattern": r"^sha256:[0-9a-f]{64}$"},
            "roles": {"type": "array", "minItems": 1, "items": role},
            "params": {"type": "object", "additionalProperties": _SCALAR},
            "states": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "minProperties": 1,
                    "additionalProperties": state,
                },
            },
            "results": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["label", "final"],
                    "additionalProperties": False,
                    "properties": {
                        "label": {"type": "string", "pattern": _LABEL_RE},
                        "final": {"type": "object", "additionalProperties": {"enum": _IDLE}},
                    },
                },
            },
            "let": {"type": "object", "additionalProperties": _SCALAR},
            "initial": {"type": "string"},
            "steps": {"type": "array", "minItems": 1, "items": step},
        },
        "allOf": [
            {
                "if": {"properties": {"kind": {"const": SUB}}},
                "then": {
                    "required": ["states", "results"],
                    "properties": {"steps": False, "let": False, "initial": False},
                },
            },
            {
                "if": {"properties": {"kind": {"const": MAN}}},
                "then": {
                    "required": ["steps"],
                    "properties": {"states": False, "results": False, "params": False},
                },
            },
        ],
        "$defs": {"primitive": _primitive_schema()},
    }


MDL_SCHEMA = _build_schema()
_VALIDATOR = jsonschema.Draft202012Validator(MDL_SCHEMA)


# --------------------------------------------------------------------------
# document model

def _pairs(mapping: Mapping[str, Any]) -> tuple[tuple[str, Any], ...]:
    return tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in mapping.items()))


def _unpairs(pairs: Iterable[tuple[str, Any]]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in pairs}


@dataclass(frozen=True)
class EventPattern:
    """What a transition (or trigger) waits for.

    ``kind`` is one of ``msg``, ``timeout``, ``arrived``, ``done``, ``decide``
    or ``lli``.
    """

    kind: str
    msg_kind: MessageKind | None = None
    action: str | None = None
    value: str | None = None

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "EventPattern":
        ((key, val),) = obj.items()
        if key == "msg":
            kind, _, action = val.partition("/")
            return cls("msg", MessageKind(kind), action or None)
        if key == "decide":
            return cls("decide", value=val)
        return cls(key)

    def to_json(self) -> dict[str, Any]:
        if self.kind == "msg":
            text = self.msg_kind.value + (f"/{self.action}" if self.action else "")
            return {"msg": text}
        if self.kind == "decide":
            return {"decide": self.value}
        return {self.kind: True}

    def __str__(self) -> str:
        if self.kind == "msg":
            return self.msg_kind.value + (f"/{self.action}" if self.action else "")
        if self.kind == "decide":
            return f"decide:{self.value}"
        return self.kind


@dataclass(frozen=True)
class Transition:
    on: EventPattern
    to: str


@dataclass(frozen=True)
class StateDef:
    id: str
    primitives: tuple[Primitive, ...]
    transitions: tuple[Transition, ...]
    note: str | None = None

    @property
    def waits(self) -> bool:
        return not any(t.on.kind == "done" for t in self.transitions)

    @property
    def wait_primitive(self) -> Primitive | None:
        for p in self.primitives:
            if p.op is PrimitiveOp.W:
                return p
        return None


@dataclass(frozen=True)
class RoleDef:
    name: str
    entry_state: IdleState
    part: str
    trigger: EventPattern | None = None
    initial: str | None = None


@dataclass(frozen=True)
class ResultDef:
    label: str
    final: tuple[tuple[str, IdleState], ...]

    @property
    def final_map(self) -> dict[str, IdleState]:
        return dict(self.final)


@dataclass(frozen=True)
class SubManoeuvreDef:
    params: tuple[tuple[str, Any], ...]
    states: tuple[tuple[str, tuple[StateDef, ...]], ...]
    results: tuple[ResultDef, ...]


@dataclass(frozen=True)
class Invocation:
    action: str
    participants: tuple[tuple[str, str], ...]
    args: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class Step:
    id: str
    invocations: tuple[Invocation, ...]
    sim: bool
    next: tuple[tuple[Any, str], ...]
    note: str | None = None

    def next_for(self, result: Any) -> str | None:
        for on, to in self.next:
            if on == result:
                return to
        return None


@dataclass(frozen=True)
class ManoeuvreDef:
    let: tuple[tuple[str, Any], ...]
    initial: str | None
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class MdlDocument:
    id: str
    kind: str
    version: str
    roles: tuple[RoleDef, ...]
    body: SubManoeuvreDef | ManoeuvreDef
    description: str | None = None
    mdl_version: str = MDL_VERSION

    @property
    def is_sub(self) -> bool:
        return self.kind == SUB

    def role(self, name: str) -> RoleDef | None:
        for r in self.roles:
            if r.name == name:
                return r
        return None

    def to_json(self) -> dict[str, Any]:
        return _doc_to_json(self)


# --------------------------------------------------------------------------
# parse / serialize

def _json_path(parts: Iterable[Any]) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    seen: dict[str, Any] = {}
    for k, v in pairs:
        if k in seen:
            raise ValueError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _reject_constant(name: str) -> Any:
    raise ValueError(f"invalid number {name}")


def _schema_error(obj: Any) -> MdlSchemaError | None:
    errs = sorted(_VALIDATOR.iter_errors(obj), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path)), e.message))
    if not errs:
        return None
    err = jsonschema.exceptions.best_match(errs)
    parts = list(err.absolute_path)
    if err.validator == "required":
        m = re.match(r"'([^']+)' is a required property", err.message)
        if m:
            parts.append(m.group(1))
    elif err.validator == "additionalProperties":
        m = re.search(r"\('([^']+)' was unexpected\)", err.message)
        if m:
            parts.append(m.group(1))
    elif err.validator is False or err.message.startswith("False schema"):
        pass
    return MdlSchemaError(err.message, _json_path(parts))


def parse(text: bytes | str) -> MdlDocument:
    """Parse MDL text into a document, strictly.

    Raises :class:`MdlSyntaxError` for malformed JSON and
    :class:`MdlSchemaError` for anything the schema rejects (unknown keys,
    unknown enum names, wrong MDL major version, digest mismatch).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MdlSyntaxError(f"invalid UTF-8: {exc.reason}", 1, exc.start + 1) from None
    try:
        obj = json.loads(text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MdlSyntaxError(exc.msg, exc.lineno, exc.colno) from None
    except ValueError as exc:
        raise MdlSyntaxError(str(exc), 1, 1) from None
    return from_json(obj)


def from_json(obj: Any) -> MdlDocument:
    if not isinstance(obj, dict):
        raise MdlSchemaError("document must be a JSON object", "$")
    version = obj.get("mdl-version")
    if isinstance(version, str) and version.split(".")[0] != MDL_VERSION:
        raise MdlSchemaError(f"unsupported mdl-version {version!r}", "$.mdl-version", "MDL_VERSION")
    err = _schema_error(obj)
    if err is not None:
        raise err
    doc = _doc_from_json(obj)
    if "digest" in obj and obj["digest"] != digest(doc):
        raise MdlSchemaError(
            "content does not match its digest (remove the digest after hand edits)",
            "$.digest",
            "DIGEST_MISMATCH",
        )
    return doc


def _prim_from_json(obj: Mapping[str, Any]) -> Primitive:
    params = {k: v for k, v in obj.items() if k != "op"}
    if "payload" in params:
        params["payload"] = _pairs(params["payload"])
    return Primitive.make(obj["op"], **params)


def _prim_to_json(p: Primitive) -> dict[str, Any]:
    out: dict[str, Any] = {"op": p.op.value}
    for k, v in p.params:
        if k == "payload":
            out[k] = _unpairs(v)
        elif isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out


def _doc_from_json(obj: dict[str, Any]) -> MdlDocument:
    roles = tuple(
        RoleDef(
            name=r["name"],
            entry_state=IdleState(r["entry_state"]),
            part=r["part"],
            trigger=EventPattern.from_json(r["trigger"]) if "trigger" in r else None,
            initial=r.get("initial"),
        )
        for r in obj["roles"]
    )
    if obj["kind"] == SUB:
        states = tuple(
            (
                role,
                tuple(
                    StateDef(
                        id=sid,
                        primitives=tuple(_prim_from_json(p) for p in s["primitives"]),
                        transitions=tuple(
                            Transition(EventPattern.from_json(t["on"]), t["to"]) for t in s["transitions"]
                        ),
                        note=s.get("note"),
                    )
                    for sid, s in sorted(table.items())
                ),
            )
            for role, table in sorted(obj["states"].items())
        )
        results = tuple(
            ResultDef(r["label"], tuple(sorted((k, IdleState(v)) for k, v in r["final"].items())))
            for r in obj["results"]
        )
        body: SubManoeuvreDef | ManoeuvreDef = SubManoeuvreDef(_pairs(obj.get("params", {})), states, results)
    else:
        steps = []
        for s in obj["steps"]:
            inv = s["invoke"]
            if isinstance(inv, dict):
                invocations = tuple(
                    Invocation(c["action"], _pairs(c["participants"]), _pairs(c.get("args", {})))
                    for c in inv["sim"]
                )
                sim = True
            else:
                invocations = (Invocation(inv, _pairs(s.get("participants", {})), _pairs(s.get("args", {}))),)
                sim = False
            nxt = tuple((tuple(n["on"]) if isinstance(n["on"], list) else n["on"], n["to"]) for n in s["next"])
            steps.append(Step(s["id"], invocations, sim, nxt, s.get("note")))
        body = ManoeuvreDef(_pairs(obj.get("let", {})), obj.get("initial"), tuple(steps))
    return MdlDocument(
        id=obj["id"],
        kind=obj["kind"],
        version=obj["version"],
        roles=roles,
        body=body,
        description=obj.get("description"),
        mdl_version=obj["mdl-version"],
    )


def _doc_to_json(doc: MdlDocument, with_digest: bool = False) -> dict[str, Any]:
    out: dict[str, Any] = {
        "mdl-version": doc.mdl_version,
        "id": doc.id,
        "kind": doc.kind,
        "version": doc.version,
    }
    if doc.description is not None:
        out["description"] = doc.description
    roles = []
    for r in doc.roles:
        rj: dict[str, Any] = {"name": r.name, "entry_state": r.entry_state.value, "part": r.part}
        if r.trigger is not None:
            rj["trigger"] = r.trigger.to_json()
        if r.initial is not None:
            rj["initial"] = r.initial
        roles.append(rj)
    out["roles"] = roles
    body = doc.body
    if isinstance(body, SubManoeuvreDef):
        if body.params:
            out["params"] = _unpairs(body.params)
        out["states"] = {
            role: {
                s.id: {
                    "primitives": [_prim_to_json(p) for p in s.primitives],
                    "transitions": [{"on": t.on.to_json(), "to": t.to} for t in s.transitions],
                    **({"note": s.note} if s.note is not None else {}),
                }
                for s in table
            }
            for role, table in body.states
        }
        out["results"] = [
            {"label": r.label, "final": {k: v.value for k, v in r.final}} for r in body.results
        ]
    else:
        if body.let:
            out["let"] = _unpairs(body.let)
        if body.initial is not None:
            out["initial"] = body.initial
        steps = []
        for s in body.steps:
            sj: dict[str, Any] = {"id": s.id}
            if s.sim:
                sj["invoke"] = {
                    "sim": [
                        {
                            "action": c.action,
                            "participants": dict(c.participants),
                            **({"args": _unpairs(c.args)} if c.args else {}),
                        }
                        for c in s.invocations
                    ]
                }
            else:
                (c,) = s.invocations
                sj["invoke"] = c.action
                sj["participants"] = dict(c.participants)
                if c.args:
                    sj["args"] = _unpairs(c.args)
            sj["next"] = [{"on": list(on) if isinstance(on, tuple) else on, "to": to} for on, to in s.next]
            if s.note is not None:
                sj["note"] = s.note
            steps.append(sj)
        out["steps"] = steps
    if with_digest:
        out["digest"] = digest(doc)
    return out


def digest(doc: MdlDocument) -> str:
    canon = json.dumps(_doc_to_json(doc), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return "sha256:" + hashlib.sha256(canon.encode("utf-8")).hexdigest()


def serialize(doc: MdlDocument) -> bytes:
    """Canonical UTF-8 text: sorted keys, two-space indent, trailing newline, digest."""
    text = json.dumps(_doc_to_json(doc, with_digest=True), sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")


# --------------------------------------------------------------------------
# registry

class Registry(Mapping[str, MdlDocument]):
    """Immutable id -> document mapping."""

    def __init__(self, docs: Iterable[MdlDocument] = ()):
        table: dict[str, MdlDocument] = {}
        for d in docs:
            if d.id in table:
                raise ValueError(f"duplicate document id {d.id}")
            table[d.id] = d
        self._docs = table

    def __getitem__(self, key: str) -> MdlDocument:
        return self._docs[key]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._docs))

    def __len__(self) -> int:
        return len(self._docs)

    def with_documents(self, docs: Iterable[MdlDocument]) -> "Registry":
        merged = dict(self._docs)
        for d in docs:
            merged[d.id] = d
        return Registry(merged.values())

    @property
    def sub_manoeuvres(self) -> list[MdlDocument]:
        return [self[k] for k in self if self[k].is_sub]

    @property
    def manoeuvres(self) -> list[MdlDocument]:
        return [self[k] for k in self if not self[k].is_sub]


# --------------------------------------------------------------------------
# validation

def _is_abort(label: str) -> bool:
    return label != RS


def _diag(out: list[Diagnostic], doc: MdlDocument, severity: str, rule: str, path: str, message: str) -> None:
    out.append(Diagnostic(severity, rule, path, message, doc.id))


def _validate_roles(doc: MdlDocument, out: list[Diagnostic]) -> None:
    names = [r.name for r in doc.roles]
    for i, n in enumerate(names):
        if n in names[:i]:
            _diag(out, doc, "error", "DUPLICATE_ROLE", f"$.roles[{i}]", f"role {n} declared twice")
    controlling = [r for r in doc.roles if r.part == CONTROLLING]
    if len(controlling) != 1:
        _diag(out, doc, "error", "CONTROLLING_ROLE_COUNT", "$.roles",
              f"expected exactly one controlling role, found {len(controlling)}")
    for i, r in enumerate(doc.roles):
        if r.part == CONTROLLING and r.entry_state is not IdleState.PL:
            _diag(out, doc, "error", "CONTROLLING_NOT_PL", f"$.roles[{i}].entry_state",
                  f"controlling role {r.name} must enter as PL")


def _validate_sub(doc: MdlDocument, out: list[Diagnostic]) -> None:
    body: SubManoeuvreDef = doc.body  # type: ignore[assignment]
    role_names = {r.name for r in doc.roles}
    tables = {role: {s.id: s for s in states} for role, states in body.states}
    labels = [r.label for r in body.results]
    for i, lab in enumerate(labels):
        if lab in labels[:i]:
            _diag(out, doc, "error", "DUPLICATE_RESULT", f"$.results[{i}]", f"result {lab} declared twice")
    if RS not in labels:
        _diag(out, doc, "error", "MISSING_SUCCESS", "$.results", "every sub-manoeuvre declares RS")
    results = {r.label: r.final_map for r in body.results}

    for role in tables:
        if role not in role_names:
            _diag(out, doc, "error", "UNKNOWN_ROLE", f"$.states.{role}", f"no role named {role}")
    for i, res in enumerate(body.results):
        fin = res.final_map
        for name in role_names - set(fin):
            _diag(out, doc, "error", "MISSING_FINAL", f"$.results[{i}].final",
                  f"result {res.label} does not declare a final state for role {name}")
        for name in set(fin) - role_names:
            _diag(out, doc, "error", "UNKNOWN_ROLE", f"$.results[{i}].final.{name}", f"no role named {name}")
        for name, st in sorted(fin.items()):
            if _is_abort(res.label) and not is_stable(st):
                _diag(out, doc, "error", "STABILITY_TERMINAL_UNSTABLE", f"$.results[{i}].final.{name}",
                      f"abort result {res.label} leaves role {name} in unstable {st.value}")
            if st is IdleState.TPL:
                if not _is_abort(res.label):
                    _diag(out, doc, "error", "STABILITY_TERMINAL_UNSTABLE", f"$.results[{i}].final.{name}",
                          f"result {res.label} leaves role {name} as TPL")

    for r in doc.roles:
        base = f"$.states.{r.name}"
        if r.name not in tables:
            _diag(out, doc, "error", "MISSING_ROLE_STATES", base, f"role {r.name} has no states")
            continue
        table = tables[r.name]
        if r.part == REACTIVE and r.trigger is None:
            _diag(out, doc, "error", "MISSING_TRIGGER", f"$.roles.{r.name}", "reactive roles need a trigger")
        if r.initial is None or r.initial not in table:
            _diag(out, doc, "error", "MISSING_INITIAL", f"$.roles.{r.name}.initial",
                  f"initial state {r.initial!r} is not a state of role {r.name}")
            continue
        _walk_role(doc, r, table, results, out)


def _walk_role(doc: MdlDocument, role: RoleDef, table: dict[str, StateDef],
               results: dict[str, dict[str, IdleState]], out: list[Diagnostic]) -> None:
    role_names = {r.name for r in doc.roles}
    base = f"$.states.{role.name}"
    seen: set[tuple[str, IdleState]] = set()
    reached_states: set[str] = set()
    reached_labels: set[str] = set()
    reported: set[tuple[str, str]] = set()
    stack = [(role.initial, role.entry_state)]
    while stack:
        sid, idle = stack.pop()
        if (sid, idle) in seen:
            continue
        seen.add((sid, idle))
        reached_states.add(sid)
        state = table[sid]
        spath = f"{base}.{sid}"
        for i, p in enumerate(state.primitives):
            ppath = f"{spath}.primitives[{i}]"
            if not primitive_allowed(p.op, idle):
                key = (ppath, idle.value)
                if key not in reported:
                    reported.add(key)
                    _diag(out, doc, "error", "PRIMITIVE_ACTOR_VIOLATION", ppath,
                          f"{p.op.value} is not allowed for role {role.name} in state {idle.value}")
            else:
                idle = apply_state_primitive(p.op, idle)
            if p.op is PrimitiveOp.W and i != len(state.primitives) - 1:
                _diag(out, doc, "error", "W_NOT_LAST", ppath, "W must be the last primitive of a state")
            if p.op is PrimitiveOp.SND:
                to = p.get("to")
                if to not in role_names or to == role.name:
                    _diag(out, doc, "error", "UNKNOWN_RECEIVER", ppath, f"cannot send to {to!r}")
            if p.op is PrimitiveOp.UPI and role.part != CONTROLLING:
                _diag(out, doc, "error", "PRIMITIVE_ACTOR_VIOLATION", ppath, "UPI is reserved for the leader")
        kinds = [t.on.kind for t in state.transitions]
        if not state.transitions:
            _diag(out, doc, "error", "DEAD_END", spath, f"state {sid} has no transitions")
        if "done" in kinds and len(kinds) > 1:
            _diag(out, doc, "error", "MIXED_DONE", spath, "a done transition must be the only one")
        if "timeout" in kinds and state.wait_primitive is None:
            _diag(out, doc, "error", "TIMEOUT_WITHOUT_WAIT", spath, "timeout transition needs a W primitive")
        if state.wait_primitive is not None and "timeout" not in kinds:
            if role.part == CONTROLLING or state.wait_primitive.get("timeout") is not None:
                _diag(out, doc, "error", "MISSING_TIMEOUT_HANDLER", spath,
                      "waiting state with a timer needs a timeout transition")
        for j, t in enumerate(state.transitions):
            if t.to in table:
                stack.append((t.to, idle))
            elif re.match(_LABEL_RE, t.to):
                if t.to not in results:
                    _diag(out, doc, "error", "UNDECLARED_RESULT", f"{spath}.transitions[{j}]",
                          f"result {t.to} is not declared")
                    continue
                reached_labels.add(t.to)
                declared = results[t.to].get(role.name)
                if declared is not None and declared is not idle:
                    key = (f"{spath}.transitions[{j}]", t.to + idle.value)
                    if key not in reported:
                        reported.add(key)
                        _diag(out, doc, "error", "RESULT_STATE_MISMATCH", f"{spath}.transitions[{j}]",
                              f"role {role.name} reaches {t.to} as {idle.value}, declared {declared.value}")
            else:
                _diag(out, doc, "error", "UNKNOWN_STATE", f"{spath}.transitions[{j}]",
                      f"{t.to!r} is neither a state nor a result")
    for label in results:
        if label not in reached_labels:
            _diag(out, doc, "error", "UNREACHABLE_RESULT", base,
                  f"no path of role {role.name} produces {label}")
    for sid in sorted(set(table) - reached_states):
        _diag(out, doc, "warning", "UNREACHABLE_STATE", f"{base}.{sid}", f"state {sid} is never entered")
    # every reachable state must be able to reach some result
    can_finish: set[str] = set()
    changed = True
    while changed:
        changed = False
        for sid in reached_states:
            if sid in can_finish:
                continue
            if any(t.to in results or t.to in can_finish for t in table[sid].transitions):
                can_finish.add(sid)
                changed = True
    for sid in sorted(reached_states - can_finish):
        if table[sid].transitions:
            _diag(out, doc, "error", "DEAD_END", f"{base}.{sid}", f"no result is reachable from {sid}")


def sub_result_sets(sub: MdlDocument) -> list[str]:
    return [r.label for r in sub.body.results]  # type: ignore[union-attr]


def step_outcomes(step: Step, registry: Mapping[str, MdlDocument]) -> list[Any]:
    """Declared outcomes of a step: labels, or label tuples for SIM steps."""
    sets = []
    for inv in step.invocations:
        sub = registry.get(inv.action)
        if sub is None or not sub.is_sub:
            return []
        sets.append(sub_result_sets(sub))
    if not step.sim:
        return list(sets[0])
    return [tuple(c) for c in itertools.product(*sets)]


def _validate_manoeuvre(doc: MdlDocument, registry: Mapping[str, MdlDocument], out: list[Diagnostic]) -> None:
    body: ManoeuvreDef = doc.body  # type: ignore[assignment]
    roles = {r.name: r for r in doc.roles}
    leader = next((r.name for r in doc.roles if r.part == CONTROLLING), None)
    steps: dict[str, Step] = {}
    for i, s in enumerate(body.steps):
        if s.id in steps or s.id == TERMINATE:
            _diag(out, doc, "error", "DUPLICATE_STEP", f"$.steps[{i}].id", f"step id {s.id} reused")
        steps.setdefault(s.id, s)
    initial = body.initial or body.steps[0].id
    if initial not in steps:
        _diag(out, doc, "error", "UNKNOWN_STEP", "$.initial", f"initial step {initial!r} does not exist")
        return
    resolved = True
    for i, s in enumerate(body.steps):
        spath = f"$.steps[{i}]"
        if s.sim and len(s.invocations) < 2:
            _diag(out, doc, "error", "SIM_ARITY", f"{spath}.invoke", "a SIM wrapper needs at least two children")
        used: dict[str, int] = {}
        for j, inv in enumerate(s.invocations):
            ipath = f"{spath}.invoke.sim[{j}]" if s.sim else f"{spath}.invoke"
            sub = registry.get(inv.action)
            if sub is None:
                _diag(out, doc, "error", "UNRESOLVED_REFERENCE", ipath, f"unknown action {inv.action}")
                resolved = False
                continue
            if not sub.is_sub:
                _diag(out, doc, "error", "NOT_A_SUBMANOEUVRE", ipath, f"{inv.action} is a manoeuvre")
                resolved = False
                continue
            sub_reactive = {r.name for r in sub.roles if r.part == REACTIVE}
            bound = dict(inv.participants)
            for name in sorted(sub_reactive - set(bound)):
                _diag(out, doc, "error", "MISSING_BINDING", ipath, f"{inv.action} role {name} is not bound")
            for name, target in sorted(bound.items()):
                if name not in sub_reactive:
                    _diag(out, doc, "error", "UNKNOWN_ROLE", ipath, f"{inv.action} has no reactive role {name}")
                if target not in roles or target == leader:
                    _diag(out, doc, "error", "UNKNOWN_ROLE", ipath, f"{target!r} is not a participant role")
                if s.sim and target in used and used[target] != j:
                    _diag(out, doc, "error", "SIM_PARTICIPANT_OVERLAP", ipath,
                          f"participant {target} is bound in two simultaneous sub-manoeuvres")
                used.setdefault(target, j)
            ctrl = next((r for r in sub.roles if r.part == CONTROLLING), None)
            if ctrl is not None and ctrl.trigger is not None and ctrl.trigger.kind == "msg" and s.id != initial:
                _diag(out, doc, "error", "REQUEST_NOT_INITIAL", ipath,
                      f"{inv.action} is request-triggered and may only be the first step")
            if s.sim and ctrl is not None and ctrl.trigger is not None and ctrl.trigger.kind == "msg":
                _diag(out, doc, "error", "REQUEST_NOT_INITIAL", ipath, "request-triggered steps cannot be SIM-wrapped")
        for k, (on, to) in enumerate(s.next):
            if to != TERMINATE and to not in steps:
                _diag(out, doc, "error", "UNKNOWN_STEP", f"{spath}.next[{k}]", f"unknown step {to!r}")
            if s.sim != isinstance(on, tuple):
                _diag(out, doc, "error", "UNDECLARED_RESULT", f"{spath}.next[{k}]",
                      "SIM steps are keyed by result tuples, plain steps by labels")
        if not resolved:
            continue
        outcomes = step_outcomes(s, registry)
        keys = [on for on, _ in s.next]
        for o in outcomes:
            if o not in keys:
                shown = list(o) if isinstance(o, tuple) else o
                _diag(out, doc, "error", "MISSING_NEXT", f"{spath}.next", f"result {shown} has no next entry")
        for k, on in enumerate(keys):
            if outcomes and on not in outcomes:
                _diag(out, doc, "error", "UNDECLARED_RESULT", f"{spath}.next[{k}]", f"{on} is not a result of this step")
            if on in keys[:k]:
                _diag(out, doc, "error", "DUPLICATE_NEXT", f"{spath}.next[{k}]", f"{on} mapped twice")
    if not resolved or errors(out):
        return
    _manoeuvre_paths(doc, registry, steps, initial, out)
    _manoeuvre_cycles(doc, steps, initial, out)


def _manoeuvre_paths(doc: MdlDocument, registry: Mapping[str, MdlDocument], steps: dict[str, Step],
                     initial: str, out: list[Diagnostic]) -> None:
    """Track each role's idle state through the declared results of every step."""
    leader = next(r.name for r in doc.roles if r.part == CONTROLLING)
    start = tuple(sorted((r.name, r.entry_state) for r in doc.roles))
    seen: set[tuple[str, Any]] = set()
    reported: set[str] = set()
    stack = [(initial, start)]
    reached_steps: set[str] = set()
    index = {s.id: i for i, s in enumerate(doc.body.steps)}  # type: ignore[union-attr]
    while stack:
        sid, idle = stack.pop()
        if (sid, idle) in seen:
            continue
        seen.add((sid, idle))
        if sid == TERMINATE:
            for name, st in idle:
                if not is_stable(st):
                    key = f"T{name}{st.value}"
                    if key not in reported:
                        reported.add(key)
                        _diag(out, doc, "error", "STABILITY_TERMINAL_UNSTABLE", "$.steps",
                              f"a path terminates with role {name} in unstable {st.value}")
            continue
        reached_steps.add(sid)
        step = steps[sid]
        cur = dict(idle)
        spath = f"$.steps[{index[sid]}]"
        child_finals = []
        for inv in step.invocations:
            sub = registry[inv.action]
            bind = dict(inv.participants)
            bind_full = {r.name: (leader if r.part == CONTROLLING else bind.get(r.name)) for r in sub.roles}
            for r in sub.roles:
                mrole = bind_full[r.name]
                if mrole is None:
                    continue
                if cur.get(mrole) is not r.entry_state:
                    key = f"E{sid}{inv.action}{r.name}{cur.get(mrole)}"
                    if key not in reported:
                        reported.add(key)
                        _diag(out, doc, "error", "ENTRY_STATE_MISMATCH", spath,
                              f"{inv.action} expects {mrole} as {r.entry_state.value}, "
                              f"but it can be {getattr(cur.get(mrole), 'value', None)} here")
            finals = {}
            for res in sub.body.results:  # type: ignore[union-attr]
                finals[res.label] = {bind_full[k]: v for k, v in res.final if bind_full.get(k)}
            child_finals.append(finals)
        for outcome in step_outcomes(step, registry):
            labels = outcome if step.sim else (outcome,)
            nxt_idle = dict(cur)
            for finals, lab in zip(child_finals, labels):
                for mrole, st in finals[lab].items():
                    if mrole == leader and len(child_finals) > 1:
                        continue
                    nxt_idle[mrole] = st
            to = step.next_for(outcome)
            if to is not None:
                stack.append((to, tuple(sorted(nxt_idle.items()))))
    for i, s in enumerate(doc.body.steps):  # type: ignore[union-attr]
        if s.id not in reached_steps:
            _diag(out, doc, "warning", "UNREACHABLE_STEP", f"$.steps[{i}]", f"step {s.id} is never invoked")


def _manoeuvre_cycles(doc: MdlDocument, steps: dict[str, Step], initial: str, out: list[Diagnostic]) -> None:
    graph = {sid: {to for _, to in s.next} for sid, s in steps.items()}
    # steps from which TERMINATE is reachable
    exits = {TERMINATE}
    changed = True
    while changed:
        changed = False
        for sid, succ in graph.items():
            if sid not in exits and succ & exits:
                exits.add(sid)
                changed = True
    for sid in sorted(graph):
        if sid not in exits:
            _diag(out, doc, "error", "CYCLE_WITHOUT_EXIT", f"$.steps.{sid}", f"step {sid} can never reach TERMINATE")

    # plain cycle detection for the warning
    color: dict[str, int] = {}

    def visit(n: str) -> bool:
        color[n] = 1
        for m in graph.get(n, ()):
            if m == TERMINATE:
                continue
            if color.get(m) == 1 or (color.get(m) is None and visit(m)):
                return True
        color[n] = 2
        return False

    if any(color.get(n) is None and visit(n) for n in sorted(graph)):
        _diag(out, doc, "warning", "MANOEUVRE_CYCLE", "$.steps", "the step graph contains a cycle (every cycle has an exit)")


def validate(doc: MdlDocument, registry: Mapping[str, MdlDocument] | None = None) -> list[Diagnostic]:
    """Structural diagnostics for ``doc``; an empty list means the document is valid."""
    registry = registry if registry is not None else {}
    out: list[Diagnostic] = []
    _validate_roles(doc, out)
    if doc.is_sub:
        _validate_sub(doc, out)
    else:
        reg = dict(registry)
        reg.setdefault(doc.id, doc)
        _validate_manoeuvre(doc, reg, out)
    return out


# --------------------------------------------------------------------------
# compilation

@dataclass(frozen=True)
class CompiledSubManoeuvre:
    doc: MdlDocument
    controlling: RoleDef
    reactive: tuple[RoleDef, ...]
    states: Mapping[str, Mapping[str, StateDef]]
    results: Mapping[str, Mapping[str, IdleState]]
    params: Mapping[str, Any]
    warnings: tuple[Diagnostic, ...] = ()

    @property
    def id(self) -> str:
        return self.doc.id

    @property
    def labels(self) -> list[str]:
        return list(self.results)

    def role(self, name: str) -> RoleDef:
        r = self.doc.role(name)
        if r is None:
            raise KeyError(name)
        return r

    @property
    def controlling_trigger(self) -> EventPattern:
        return self.controlling.trigger or EventPattern("lli")

    @property
    def request_triggered(self) -> bool:
        return self.controlling_trigger.kind == "msg"


@dataclass(frozen=True)
class CompiledManoeuvre:
    doc: MdlDocument
    leader_role: str
    steps: Mapping[str, Step]
    initial: str
    subs: Mapping[str, CompiledSubManoeuvre]
    let: Mapping[str, Any] = field(default_factory=dict)
    warnings: tuple[Diagnostic, ...] = ()

    @property
    def id(self) -> str:
        return self.doc.id

    @property
    def requestable(self) -> bool:
        first = self.steps[self.initial]
        return any(self.subs[i.action].request_triggered for i in first.invocations)

    @property
    def participant_roles(self) -> list[str]:
        return [r.name for r in self.doc.roles if r.part == REACTIVE]

    @classmethod
    def wrapping(cls, sub: CompiledSubManoeuvre) -> "CompiledManoeuvre":
        """A one-step manoeuvre that invokes ``sub`` and terminates on any result."""
        roles = tuple(RoleDef(r.name, r.entry_state, r.part) for r in sub.doc.roles)
        step = Step(
            "s1",
            (Invocation(sub.id, tuple((r.name, r.name) for r in sub.reactive)),),
            False,
            tuple((lab, TERMINATE) for lab in sub.labels),
        )
        doc = MdlDocument(sub.id, MAN, sub.doc.version, roles, ManoeuvreDef((), "s1", (step,)))
        return cls(doc, sub.controlling.name, {"s1": step}, "s1", {sub.id: sub})


CompiledBehaviour = CompiledSubManoeuvre | CompiledManoeuvre


def compile(doc: MdlDocument, registry: Mapping[str, MdlDocument] | None = None) -> CompiledBehaviour:
    """Link ``doc`` into an executable definition, raising on any error diagnostic."""
    registry = registry if registry is not None else {}
    diags = validate(doc, registry)
    if errors(diags):
        raise MdlCompileError(diags)
    warnings = tuple(diags)
    if doc.is_sub:
        body: SubManoeuvreDef = doc.body  # type: ignore[assignment]
        ctrl = next(r for r in doc.roles if r.part == CONTROLLING)
        return CompiledSubManoeuvre(
            doc=doc,
            controlling=ctrl,
            reactive=tuple(r for r in doc.roles if r.part == REACTIVE),
            states={role: {s.id: s for s in states} for role, states in body.states},
            results={r.label: r.final_map for r in body.results},
            params=_unpairs(body.params),
            warnings=warnings,
        )
    mbody: ManoeuvreDef = doc.body  # type: ignore[assignment]
    subs = {}
    for s in mbody.steps:
        for inv in s.invocations:
            if inv.action not in subs:
                subs[inv.action] = compile(registry[inv.action], registry)
    return CompiledManoeuvre(
        doc=doc,
        leader_role=next(r.name for r in doc.roles if r.part == CONTROLLING),
        steps={s.id: s for s in mbody.steps},
        initial=mbody.initial or mbody.steps[0].id,
        subs=subs,
        let=_unpairs(mbody.let),
        warnings=warnings,
    )


@dataclass(frozen=True)
class Behaviours:
    """Everything a vehicle needs at runtime, compiled from one registry.

    ``reactive`` is the RSM dispatch table keyed by (action, triggering kind);
    ``requestable`` maps REQ actions to the manoeuvre they start.
    """

    subs: Mapping[str, CompiledSubManoeuvre]
    manoeuvres: Mapping[str, CompiledManoeuvre]
    reactive: Mapping[tuple[str, MessageKind], tuple[CompiledSubManoeuvre, RoleDef]]
    requestable: Mapping[str, CompiledManoeuvre]

    def manoeuvre(self, action: str) -> CompiledManoeuvre | None:
        if action in self.manoeuvres:
            return self.manoeuvres[action]
        if action in self.subs:
            return CompiledManoeuvre.wrapping(self.subs[action])
        return None


def compile_registry(registry: Registry) -> Behaviours:
    subs: dict[str, CompiledSubManoeuvre] = {}
    mans: dict[str, CompiledManoeuvre] = {}
    for doc in registry.values():
        compiled = compile(doc, registry)
        if isinstance(compiled, CompiledSubManoeuvre):
            subs[doc.id] = compiled
        else:
            mans[doc.id] = compiled
    reactive = {}
    for sub in subs.values():
        for r in sub.reactive:
            trig = r.trigger
            if trig is not None and trig.kind == "msg":
                reactive[(trig.action or sub.id, trig.msg_kind)] = (sub, r)
    requestable = {m.id: m for m in mans.values() if m.requestable}
    return Behaviours(subs, mans, reactive, requestable)
