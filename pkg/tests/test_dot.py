from sead import mdl
from sead.catalogue import builtin_registry
from sead.dot import _q, to_dot


def _beh():
    return mdl.compile_registry(builtin_registry())


def test_quoting():
    assert _q('a"b\\c\nd') == '"a\\"b\\\\c\\nd"'


def test_manoeuvre_graph():
    text = to_dot(_beh().manoeuvres["JOIN_TAIL"])
    assert text.startswith('digraph "JOIN_TAIL" {') and text.rstrip().endswith("}")
    assert '"negotiate" [label="negotiate: NEGOTIATE [B=B]", peripheries=2];' in text
    assert '"attach" -> "TERMINATE" [label="RA1"];' in text


def test_sim_step_edges_show_tuples():
    text = to_dot(_beh().manoeuvres["OPEN_TWO_GAPS"])
    assert "(RS, RA1)" in text


def test_sub_manoeuvre_graph_has_one_cluster_per_role():
    text = to_dot(_beh().subs["GAPCLOSE"])
    assert text.count('subgraph "cluster_') == 2
    assert "DN" in text and "timeout" in text.lower()
