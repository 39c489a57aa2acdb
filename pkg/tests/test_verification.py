import pytest
from hypothesis import given, settings, strategies as st

from sead import mdl, simulation as sim, verification as V
from sead.catalogue import builtin_registry, load_scenario, mutant_expectations, mutant_paths, scenario_paths
from sead.core import IdleState, is_stable

from . import oracles


@pytest.fixture(scope="module")
def beh():
    return mdl.compile_registry(builtin_registry())


def _plain(outcomes):
    return {(o.result, tuple((r, s.value) for r, s in o.states)) for o in outcomes}


def test_gapclose_outcomes(beh):
    assert _plain(V.enumerate_outcomes(beh.subs["GAPCLOSE"])) == oracles.GAPCLOSE_OUTCOMES


def test_open_two_gaps_has_four_result_tuples(beh):
    outs = V.enumerate_outcomes(beh.manoeuvres["OPEN_TWO_GAPS"])
    assert {o.result for o in outs} == oracles.OPEN_TWO_GAPS_RESULTS
    for o in outs:
        # a refused gap leaves that follower leading its own rear part
        for (role, res) in zip(("B", "C"), o.result):
            assert o.state_map[role] is (IdleState.PF if res == "RS" else IdleState.PL)


def test_every_catalogue_behaviour_verifies_clean(beh):
    for b in list(beh.subs.values()) + list(beh.manoeuvres.values()):
        assert mdl.errors(V.verify(b, coverage=True)) == [], b.id


def test_every_catalogue_ending_is_stable(beh):
    for b in list(beh.subs.values()) + list(beh.manoeuvres.values()):
        for o in V.enumerate_outcomes(b):
            if isinstance(b, mdl.CompiledManoeuvre) or o.result != "RS":
                assert all(is_stable(s) for _, s in o.states), (b.id, o)


def test_catalogue_is_fully_covered(beh):
    for b in list(beh.subs.values()):
        assert V.check_coverage(b) == [], b.id


def _mutant_rules(path, reg):
    doc = mdl.parse(path.read_bytes())
    diags = mdl.validate(doc, reg)
    if not mdl.errors(diags):
        diags += V.verify(mdl.compile(doc, reg))
    return doc.id, {d.rule for d in mdl.errors(diags)}


@pytest.mark.parametrize("path", mutant_paths(), ids=lambda p: p.stem)
def test_mutant_is_rejected_by_its_rule(path):
    mid, rules = _mutant_rules(path, builtin_registry())
    assert rules == {oracles.MUTANT_RULES[mid]}
    assert mutant_expectations()[mid] == oracles.MUTANT_RULES[mid]


def test_every_mutant_rule_is_exercised():
    reg = builtin_registry()
    seen = {_mutant_rules(p, reg)[0] for p in mutant_paths()}
    assert seen == set(oracles.MUTANT_RULES)


def test_outcome_set_reports_explored_size(beh):
    outs = V.enumerate_outcomes(beh.manoeuvres["JOIN_TAIL"])
    assert outs.explored > 0
    assert {o.step for o in outs} == {"negotiate", "move", "attach"}


def test_state_bound_is_enforced(beh, monkeypatch):
    monkeypatch.setattr(V, "MAX_STATES", 1)
    diags = V.verify(beh.manoeuvres["JOIN_MIDDLE"])
    assert [d.rule for d in diags] == ["STATE_EXPLOSION"]


def _as_key(step, result, states):
    return step, result, tuple(sorted(states.items()))


@pytest.mark.parametrize("name", [p.stem for p in scenario_paths() if load_scenario(p.stem).get("script")])
def test_faulty_runs_only_reach_enumerated_outcomes(beh, name):
    data = load_scenario(name)
    cfg = sim.scenario_config(data)
    for faults in sim.fault_matrix(data, cfg):
        r = sim.World(data, cfg, faults=faults).run()
        for action, step, result, states in r.outcomes():
            enumerated = {_as_key(o.step, o.result, {k: v.value for k, v in o.states})
                          for o in V.enumerate_outcomes(beh.manoeuvre(action))}
            assert _as_key(step, result, states) in enumerated, (faults, action)


SCRIPTED = [p.stem for p in scenario_paths() if load_scenario(p.stem).get("script")]


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(SCRIPTED), st.floats(min_value=0.0, max_value=1.0), st.integers(0, 10_000))
def test_lossy_runs_stay_inside_the_enumeration(name, drop, seed):
    beh = mdl.compile_registry(builtin_registry())
    data = load_scenario(name)
    r = sim.World(data, sim.scenario_config(data, {"drop": drop}), seed).run()
    for action, step, result, states in r.outcomes():
        enumerated = {_as_key(o.step, o.result, {k: v.value for k, v in o.states})
                      for o in V.enumerate_outcomes(beh.manoeuvre(action))}
        assert _as_key(step, result, states) in enumerated
