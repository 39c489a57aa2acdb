import pytest

from sead import mdl, simulation as sim
from sead.catalogue import (
    MANOEUVRES,
    SUB_MANOEUVRES,
    builtin_registry,
    definition_paths,
    golden,
    load_mutant,
    load_scenario,
    mutant_expectations,
    scenario_paths,
)


def test_every_definition_is_shipped():
    ids = {mdl.parse(p.read_bytes()).id for p in definition_paths()}
    assert ids == set(SUB_MANOEUVRES) | set(MANOEUVRES)


def test_file_names_follow_ids():
    for p in definition_paths():
        assert p.name == mdl.parse(p.read_bytes()).id.lower() + ".mdl.json"


def test_registry_compiles():
    beh = mdl.compile_registry(builtin_registry())
    assert set(beh.subs) == set(SUB_MANOEUVRES) and set(beh.manoeuvres) == set(MANOEUVRES)
    assert set(beh.requestable) == {"JOIN_TAIL", "JOIN_MIDDLE"}


@pytest.mark.parametrize("path", scenario_paths(), ids=lambda p: p.stem)
def test_scenarios_are_valid_and_have_goldens(path):
    data = load_scenario(path.stem)
    sim.validate_scenario(data)
    assert set(golden(path.stem)) >= {"platoons", "idle", "messages", "ordered", "action", "result"}


def test_mutants_load_by_id():
    for mid in mutant_expectations():
        assert load_mutant(mid).id == mid
