import pytest

from sead import mdl
from sead.catalogue import builtin_registry
from sead.core import IdleState, Message, MessageKind, PrimitiveOp
from sead.statemachine import (
    Event,
    ManoeuvreInstance,
    SimWrapperError,
    SubMachineInstance,
    UndeclaredResult,
    UnexpectedEvent,
    advance_manoeuvre,
    resolve,
    wrap_sim,
)

from . import oracles


@pytest.fixture(scope="module")
def beh():
    return mdl.compile_registry(builtin_registry())


def _ord(gap=6.0):
    return Message(MessageKind.ORD, "GAPCLOSE", "V0", ("V1",), "c1", {"gap": gap})


def test_resolve_expressions():
    ctx = {"d": 6.0, "D": 30.0, "tail": "V2"}
    assert resolve("$d", ctx) == 6.0
    assert resolve("-$d", ctx) == -6.0
    assert resolve("-0.5*$D", ctx) == -15.0
    assert resolve("$tail", ctx) == "V2"
    assert resolve(4, ctx) == 4


def test_reactive_gapclose_entry(beh):
    b = SubMachineInstance(beh.subs["GAPCLOSE"], "B", "c1", {"A": "V0", "B": "V1"})
    out = b.step(Event.msg(_ord()))
    assert [p.op for p in out.primitives] == [PrimitiveOp.BTL, PrimitiveOp.SH, PrimitiveOp.W]
    assert out.primitives[1].get("space") == 6.0
    assert out.state == "B2" and not out.completed


def test_reactive_abort_path(beh):
    b = SubMachineInstance(beh.subs["GAPCLOSE"], "B", "c1", {"A": "V0", "B": "V1"})
    b.step(Event.msg(_ord()))
    out = b.step(Event.msg(Message(MessageKind.ABT, "GAPCLOSE", "V0", ("V1",), "c1")))
    assert [p.op for p in out.primitives] == [PrimitiveOp.BPL]
    assert out.result == "RA1" and out.final_idle is IdleState.PL


def test_controlling_success(beh):
    a = SubMachineInstance(beh.subs["GAPCLOSE"], "A", "c1", {"A": "V0", "B": "V1"}, {"d": 6.0, "D": 30.0})
    out = a.step(Event.lli())
    snd = out.primitives[0]
    assert snd.op is PrimitiveOp.SND and snd.get("to") == "V1" and dict(snd.get("payload")) == {"gap": 6.0}
    assert out.state == "A2"
    assert out.primitives[-1].get("timeout") == 30
    out = a.step(Event.msg(Message(MessageKind.DN, "GAPCLOSE", "V1", ("V0",), "c1")))
    assert out.result == "RS" and out.final_idle is IdleState.PL


def test_controlling_timeout_aborts_and_updates(beh):
    a = SubMachineInstance(beh.subs["GAPCLOSE"], "A", "c1", {"A": "V0", "B": "V1"}, {"d": 6.0})
    a.step(Event.lli())
    out = a.step(Event.timeout())
    assert [p.op for p in out.primitives] == [PrimitiveOp.SND, PrimitiveOp.UPI]
    assert out.result == "RA1"


def test_unexpected_event_is_rejected(beh):
    b = SubMachineInstance(beh.subs["GAPCLOSE"], "B", "c1", {"A": "V0", "B": "V1"})
    with pytest.raises(UnexpectedEvent):
        b.step(Event.arrived())
    b.step(Event.msg(_ord()))
    with pytest.raises(UnexpectedEvent):
        b.step(Event.msg(Message(MessageKind.ACK, "GAPCLOSE", "V0", ("V1",), "c1")))


def test_concluded_instance_accepts_nothing(beh):
    b = SubMachineInstance(beh.subs["GAPCLOSE"], "B", "c1", {"A": "V0", "B": "V1"})
    b.step(Event.msg(_ord()))
    b.step(Event.arrived())
    assert b.completed
    with pytest.raises(UnexpectedEvent):
        b.step(Event.arrived())


def test_args_override_params_and_environment(beh):
    a = SubMachineInstance(beh.subs["MOVETOPOS"], "A", "c1", {"A": "V0", "B": "V3"},
                           {"d": 6.0, "D": 30.0, "tail": "V2"}, args={"offset": "-0.5*$D", "target": "V1"})
    assert a.context["offset"] == -15.0 and a.context["target"] == "V1"


def test_unbound_role_is_rejected(beh):
    with pytest.raises(ValueError):
        SubMachineInstance(beh.subs["GAPCLOSE"], "B", "c1", {"A": "V0"})


def _gapopen(beh, vehicle, corr):
    return SubMachineInstance(beh.subs["GAPOPEN"], "A", corr, {"A": "V0", "B": vehicle}, {"d": 6.0, "D": 30.0})


def test_sim_wrapper_product(beh):
    w = wrap_sim([_gapopen(beh, "V1", "c1"), _gapopen(beh, "V3", "c2")])
    assert set(w.outcome_set()) == oracles.OPEN_TWO_GAPS_RESULTS
    w.record(w.children[1], "RA1")
    assert not w.completed
    w.record(w.children[0], "RS")
    assert w.outcome == ("RS", "RA1")


def test_sim_wrapper_rejects_shared_vehicle(beh):
    with pytest.raises(SimWrapperError) as exc:
        wrap_sim([_gapopen(beh, "V2", "c1"), _gapopen(beh, "V2", "c2")])
    assert exc.value.code == "SIM_PARTICIPANT_OVERLAP"


def test_sim_wrapper_needs_two_children(beh):
    with pytest.raises(SimWrapperError):
        wrap_sim([_gapopen(beh, "V1", "c1")])


def test_join_tail_chain(beh):
    inst = ManoeuvreInstance(beh.manoeuvres["JOIN_TAIL"], "V0", {"B": "V3"})
    first = inst.start()
    assert first.invocations[0][0].id == "NEGOTIATE"
    nxt = advance_manoeuvre(inst, "RS")
    sub, parts, args = nxt.invocations[0]
    assert sub.id == "MOVETOPOS" and parts == {"A": "V0", "B": "V3"}
    assert args == {"target": "$tail", "offset": "-$d"}
    nxt = advance_manoeuvre(inst, "RS")
    assert nxt.invocations[0][0].id == "ATTACH"
    assert advance_manoeuvre(inst, "RS").kind == "terminate"
    assert inst.terminated and inst.history == [("negotiate", "RS"), ("move", "RS"), ("attach", "RS")]


def test_join_tail_rejection_terminates(beh):
    inst = ManoeuvreInstance(beh.manoeuvres["JOIN_TAIL"], "V0", {"B": "V3"})
    inst.start()
    assert advance_manoeuvre(inst, "RA1").kind == "terminate"


def test_undeclared_step_result(beh):
    inst = ManoeuvreInstance(beh.manoeuvres["JOIN_TAIL"], "V0", {"B": "V3"})
    inst.start()
    with pytest.raises(UndeclaredResult):
        advance_manoeuvre(inst, "RA7")


def test_sim_step_takes_tuples(beh):
    inst = ManoeuvreInstance(beh.manoeuvres["OPEN_TWO_GAPS"], "V0", {"B": "V1", "C": "V3"})
    assert len(inst.start().invocations) == 2
    assert advance_manoeuvre(inst, ["RS", "RA1"]).kind == "terminate"
