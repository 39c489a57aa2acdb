import copy
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from sead import mdl
from sead.catalogue import builtin_registry, definition_paths
from sead.core import IdleState

from . import oracles

PATHS = definition_paths()


def _gapclose_json() -> dict:
    doc = json.loads((p for p in PATHS if p.name == "gapclose.mdl.json").__next__().read_text())
    doc.pop("digest")
    return doc


@pytest.mark.parametrize("path", PATHS, ids=lambda p: p.name)
def test_catalogue_round_trips_byte_identically(path):
    raw = path.read_bytes()
    doc = mdl.parse(raw)
    assert mdl.serialize(doc) == raw
    assert mdl.parse(mdl.serialize(doc)) == doc


def test_serialize_is_deterministic():
    doc = builtin_registry()["JOIN_TAIL"]
    assert mdl.serialize(doc) == mdl.serialize(doc)


def test_minimal_sub_manoeuvre():
    doc = mdl.parse(json.dumps(_gapclose_json()))
    assert doc.id == "GAPCLOSE" and doc.is_sub
    assert len(doc.roles) == 2
    assert [r.label for r in doc.body.results] == ["RS", "RA1"]


def test_enum_names_are_canonical():
    text = mdl.serialize(builtin_registry()["GAPCLOSE"]).decode()
    assert '"ORD"' in text and '"RA1"' in text and '"PF"' in text


def test_missing_results_is_a_schema_error():
    obj = _gapclose_json()
    del obj["results"]
    with pytest.raises(mdl.MdlSchemaError) as exc:
        mdl.from_json(obj)
    assert exc.value.path == "$.results"


@pytest.mark.parametrize("text", ["{", '{"id": "A", "id": "B"}', "[1, NaN]", b"\xff\xfe"])
def test_syntax_errors(text):
    with pytest.raises(mdl.MdlSyntaxError):
        mdl.parse(text)


def test_unknown_keys_and_enum_names_are_rejected():
    obj = _gapclose_json()
    obj["colour"] = "red"
    with pytest.raises(mdl.MdlSchemaError):
        mdl.from_json(obj)
    obj = _gapclose_json()
    obj["results"][0]["final"]["B"] = "XX"
    with pytest.raises(mdl.MdlSchemaError):
        mdl.from_json(obj)


def test_future_major_version_is_rejected():
    obj = _gapclose_json()
    obj["mdl-version"] = "2"
    with pytest.raises(mdl.MdlSchemaError) as exc:
        mdl.from_json(obj)
    assert exc.value.rule == "MDL_VERSION"


def test_digest_mismatch_is_reported():
    obj = json.loads(mdl.serialize(builtin_registry()["GAPCLOSE"]))
    obj["params"]["timeout"] = 31
    with pytest.raises(mdl.MdlSchemaError) as exc:
        mdl.from_json(obj)
    assert exc.value.rule == "DIGEST_MISMATCH"


@pytest.mark.parametrize("doc_id", sorted(builtin_registry()))
def test_catalogue_validates_clean(doc_id):
    reg = builtin_registry()
    assert mdl.errors(mdl.validate(reg[doc_id], reg)) == []


def _rules(doc, reg=None):
    return {d.rule for d in mdl.errors(mdl.validate(doc, reg if reg is not None else builtin_registry()))}


def test_unstable_abort_ending_is_flagged():
    obj = _gapclose_json()
    obj["results"][1]["final"]["B"] = "WPF"
    assert "STABILITY_TERMINAL_UNSTABLE" in _rules(mdl.from_json(obj))


def test_sh_by_free_vehicle_is_an_actor_violation():
    obj = _gapclose_json()
    b2 = obj["states"]["B"]["B2"]
    b2["primitives"] = [p for p in b2["primitives"] if p["op"] != "BTL"]
    obj["roles"][1]["entry_state"] = "FV"
    assert "PRIMITIVE_ACTOR_VIOLATION" in _rules(mdl.from_json(obj))


def test_unknown_action_is_unresolved():
    obj = json.loads(mdl.serialize(builtin_registry()["JOIN_TAIL"]))
    obj.pop("digest")
    obj["steps"][1]["invoke"] = "TELEPORT"
    assert "UNRESOLVED_REFERENCE" in _rules(mdl.from_json(obj))


def test_sim_overlap_is_a_compile_error():
    obj = json.loads(mdl.serialize(builtin_registry()["OPEN_TWO_GAPS"]))
    obj.pop("digest")
    obj["steps"][0]["invoke"]["sim"][1]["participants"] = {"B": "B"}
    reg = builtin_registry()
    with pytest.raises(mdl.MdlCompileError) as exc:
        mdl.compile(mdl.from_json(obj), reg)
    assert "SIM_PARTICIPANT_OVERLAP" in {d.rule for d in exc.value.diagnostics}


def test_join_tail_compiles_to_three_linked_steps():
    reg = builtin_registry()
    man = mdl.compile(reg["JOIN_TAIL"], reg)
    assert len(man.steps) == oracles.JOIN_TAIL_STEPS
    assert [s.invocations[0].action for s in man.steps.values()] == ["NEGOTIATE", "MOVETOPOS", "ATTACH"]
    assert set(man.subs) == {"NEGOTIATE", "MOVETOPOS", "ATTACH"}


def test_registry_lookup_of_unknown_id():
    assert "TELEPORT" not in builtin_registry()
    assert builtin_registry().get("TELEPORT") is None


def test_compiled_results_carry_final_states():
    reg = builtin_registry()
    sub = mdl.compile(reg["GAPCLOSE"], reg)
    assert sub.results == {"RS": {"A": IdleState.PL, "B": IdleState.PF}, "RA1": {"A": IdleState.PL, "B": IdleState.PL}}


# ---------------------------------------------------------------- fuzz

_ALPHABET = '{}[]",:0123456789.-abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_$ \n'


def _text_edit(raw: str, rng: random.Random) -> str:
    i = rng.randrange(len(raw))
    kind = rng.choice(["insert", "delete", "replace"])
    if kind == "insert":
        return raw[:i] + rng.choice(_ALPHABET) + raw[i:]
    if kind == "delete":
        return raw[:i] + raw[i + 1:]
    return raw[:i] + rng.choice(_ALPHABET) + raw[i + 1:]


def _leaves(obj, path=()):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield path + (k,), v
            yield from _leaves(v, path + (k,))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield path + (i,), v
            yield from _leaves(v, path + (i,))


def _structural_edit(raw: str, rng: random.Random) -> str:
    obj = json.loads(raw)
    path, value = rng.choice(list(_leaves(obj)))
    parent = obj
    for p in path[:-1]:
        parent = parent[p]
    key = path[-1]
    kind = rng.choice(["remove", "retype", "tweak", "rename"])
    if kind == "remove":
        del parent[key]
    elif kind == "retype":
        parent[key] = rng.choice([None, 0, "", [], {}, True])
    elif kind == "tweak":
        if isinstance(value, bool):
            parent[key] = not value
        elif isinstance(value, (int, float)):
            parent[key] = value + rng.choice([-1, 1, 0.5])
        elif isinstance(value, str):
            parent[key] = value + "X" if rng.random() < 0.5 else value[:-1]
        elif isinstance(value, list) and len(value) > 1:
            parent[key] = list(reversed(value))
        else:
            parent[key] = copy.deepcopy(value)
    elif isinstance(parent, dict):
        parent[key + "_"] = parent.pop(key)
    else:
        parent.insert(key, copy.deepcopy(value))
    return json.dumps(obj, indent=2, sort_keys=True)


def _edit_is_detected_or_harmless(raw: str, edited: str) -> bool:
    original = mdl.parse(raw)
    try:
        doc = mdl.parse(edited)
    except mdl.MdlError:
        return True
    if doc == original:
        return True
    return bool(mdl.errors(mdl.validate(doc, builtin_registry())))


def run_fuzz(cases: int, seed: int = 7) -> list[str]:
    """Apply ``cases`` single edits to catalogue files; return the silent ones."""
    rng = random.Random(seed)
    texts = [p.read_text() for p in PATHS]
    silent = []
    for n in range(cases):
        raw = texts[n % len(texts)]
        edit = _text_edit if n % 2 else _structural_edit
        edited = edit(raw, rng)
        if not _edit_is_detected_or_harmless(raw, edited):
            silent.append(edited)
    return silent


def test_single_edit_fuzz_never_changes_meaning_silently():
    assert run_fuzz(oracles.FUZZ_CASES) == []


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(PATHS), st.integers(min_value=0, max_value=2**32 - 1))
def test_single_edit_property(path, seed):
    rng = random.Random(seed)
    raw = path.read_text()
    edited = (_text_edit if seed % 2 else _structural_edit)(raw, rng)
    assert _edit_is_detected_or_harmless(raw, edited)


@given(st.sampled_from(PATHS), st.sampled_from([" ", "\n", "\t"]))
def test_whitespace_between_tokens_is_harmless(path, ws):
    raw = path.read_text()
    edited = raw.replace(",\n", "," + ws + "\n", 1)
    assert mdl.parse(edited) == mdl.parse(raw)


def test_published_schema_matches_the_enforced_one():
    import json
    from pathlib import Path

    published = Path(__file__).resolve().parent.parent / "docs" / "mdl.schema.json"
    assert json.loads(published.read_text()) == mdl.MDL_SCHEMA
