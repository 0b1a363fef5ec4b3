import copy
import graphlib

import pytest
from hypothesis import given, settings, strategies as st

from pelletflow.graph import (
    DataflowGraph, EdgeSpec, GraphSyntaxError, PelletSpec, PortSpec, SplitSpec, WindowSpec,
    back_edges, load_graph, parse_graph, serialize_graph, validate_graph, wiring_order,
)

from conftest import data_path

TWO = """graph two
pellet A impl=identity
pellet B impl=sink
port A.out out
port B.in in
edge A.out -> B.in
"""


def chain(*ids, extra=""):
    lines = ["graph g"]
    for pid in ids:
        lines += [f"pellet {pid} impl=identity", f"port {pid}.in in", f"port {pid}.out out"]
    return "\n".join(lines) + "\n" + extra


def test_two_pellet_defaults():
    g = parse_graph(TWO)
    assert [p.id for p in g.pellets] == ["A", "B"]
    assert len(g.edges) == 1
    assert all(p.trigger == "push" for p in g.pellets)
    assert g.edges[0].transport == "push"


def test_zero_width_window_rejected():
    text = TWO + "window B.in count 0\n"
    with pytest.raises(GraphSyntaxError, match="width must be positive"):
        parse_graph(text)
    with pytest.raises(ValueError, match="width must be positive"):
        WindowSpec("count", 0)


def test_bundled_integration_graph():
    g = load_graph(data_path("integration.graph"))
    assert len(g.pellets) == 10
    assert len(g.edges) == 11
    assert len(g.in_edges("I2", "in")) == 3  # interleaved merge
    assert len(g.pellet("I3").out_ports()) == 3  # switch
    assert validate_graph(g).ok


@pytest.mark.parametrize("text,line", [
    ("graph g\nfrobnicate x\n", 2),
    ("graph g\npellet A impl=x colour=red\n", 2),
    ("graph g\npellet A impl=x cores=two\n", 2),
    ("graph g\npellet A impl=x trigger=sometimes\n", 2),
    ("pellet A impl=x\n", 1),
])
def test_syntax_errors_carry_position(text, line):
    with pytest.raises(GraphSyntaxError) as info:
        parse_graph(text)
    assert info.value.line == line
    assert info.value.column >= 1


def test_dangling_port_is_error_at_edge():
    text = chain("A", "B", extra="edge A.out -> B.q\n")
    report = validate_graph(parse_graph(text))
    assert not report.ok
    assert any("edge 1" in d.location and "B.q" in d.message for d in report.errors)


def test_push_stateful_is_error():
    text = chain("A", extra="").replace("impl=identity", "impl=identity stateful")
    report = validate_graph(parse_graph(text))
    assert [d.message for d in report.errors] == ["push pellets are implicitly stateless"]


def test_pull_stateful_is_fine():
    text = chain("A").replace("impl=identity", "impl=identity trigger=pull stateful")
    assert validate_graph(parse_graph(text)).ok


def test_cycle_is_legal():
    text = chain("A", "B", extra="edge A.out -> B.in\nedge B.out -> A.in\n")
    assert validate_graph(parse_graph(text)).ok


def test_duplicate_ids_and_bad_split():
    g = DataflowGraph("g", (PelletSpec("A", "x", ports=(PortSpec("o", "out"),)),
                            PelletSpec("A", "x", ports=(PortSpec("o", "out"),))),
                      (), (SplitSpec("A", "nope", "duplicate"),))
    msgs = [d.message for d in validate_graph(g).errors]
    assert "duplicate pellet id" in msgs
    assert "split references an undeclared output port" in msgs


def test_keyhash_needs_an_edge_and_warns():
    text = chain("A", "B", extra="edge A.out -> B.in\nsplit A.out keyhash\n")
    report = validate_graph(parse_graph(text))
    assert report.ok and any("key" in d.message for d in report.warnings)
    text = chain("A", extra="split A.out keyhash\n")
    assert not validate_graph(parse_graph(text)).ok


def test_no_ports_is_error():
    g = DataflowGraph("g", (PelletSpec("A", "x"),))
    assert not validate_graph(g).ok


def test_unreachable_warning():
    text = chain("A", "B", "C", extra="edge A.out -> B.in\nedge C.out -> C.in\n")
    report = validate_graph(parse_graph(text))
    assert report.ok
    assert any(d.location == "pellet C" for d in report.warnings)


def test_diagnostic_format():
    text = chain("A", "B", extra="edge A.out -> B.q\n")
    d = validate_graph(parse_graph(text)).errors[0]
    assert str(d).startswith("error:edge 1")
    assert str(d).count(":") >= 2


def test_wiring_order_linear():
    g = parse_graph(chain("A", "B", "C", extra="edge A.out -> B.in\nedge B.out -> C.in\n"))
    assert wiring_order(g) == ["C", "B", "A"]


def test_wiring_order_diamond():
    text = chain("A", "B", "C", "D", extra="""edge A.out -> B.in
edge A.out -> C.in
edge B.out -> D.in
edge C.out -> D.in
""")
    assert wiring_order(parse_graph(text)) == ["D", "B", "C", "A"]


def test_wiring_order_cycle_with_source():
    text = chain("A", "B", "S", extra="edge S.out -> A.in\nedge A.out -> B.in\nedge B.out -> A.in\n")
    g = parse_graph(text)
    assert back_edges(g) == {("B", "A")}
    assert wiring_order(g) == ["B", "A", "S"]


def test_wiring_order_pure_cycle():
    g = parse_graph(chain("A", "B", extra="edge A.out -> B.in\nedge B.out -> A.in\n"))
    order = wiring_order(g)
    assert sorted(order) == ["A", "B"] and order[-1] == "A"


@st.composite
def dags(draw, max_n=9):
    n = draw(st.integers(1, max_n))
    ids = [f"P{i}" for i in range(n)]
    edges = []
    for j in range(n):
        for i in range(j):
            if draw(st.booleans()):
                edges.append((ids[i], ids[j]))
    perm = draw(st.permutations(ids))  # decouple ids from topological position
    rename = dict(zip(ids, perm))
    return [rename[x] for x in ids], [(rename[a], rename[b]) for a, b in edges]


def _graph(ids, edges, splits=()):
    pellets = tuple(PelletSpec(i, "identity", ports=(PortSpec("in", "in"), PortSpec("out", "out")))
                    for i in ids)
    return DataflowGraph("g", pellets, tuple(EdgeSpec((a, "out"), (b, "in")) for a, b in edges), tuple(splits))


@settings(max_examples=150, deadline=None)
@given(dags())
def test_wiring_order_is_reverse_topological(dag):
    ids, edges = dag
    g = _graph(ids, edges)
    order = wiring_order(g)
    assert sorted(order) == sorted(ids)
    pos = {p: i for i, p in enumerate(order)}
    # stdlib topological sorter as the oracle for "a valid order exists"
    ts = graphlib.TopologicalSorter({p: set() for p in ids})
    for a, b in edges:
        ts.add(b, a)
        assert pos[b] < pos[a]
    topo = list(ts.static_order())
    assert len(topo) == len(ids)
    assert back_edges(g) == set()


@settings(max_examples=100, deadline=None)
@given(dags(), st.data())
def test_parse_serialize_round_trip(dag, data):
    ids, edges = dag
    splits = []
    for pid in ids:
        if data.draw(st.booleans()):
            splits.append(SplitSpec(pid, "out", data.draw(st.sampled_from(["duplicate", "round_robin", "key_hash"]))))
    pellets = []
    for pid in ids:
        pellets.append(PelletSpec(
            pid, data.draw(st.sampled_from(["identity", "sink"])),
            trigger=data.draw(st.sampled_from(["push", "pull"])),
            ordered=data.draw(st.booleans()),
            ports=(PortSpec("in", "in"), PortSpec("out", "out")),
            windows=(("in", WindowSpec("count", data.draw(st.integers(1, 9)))),) if data.draw(st.booleans()) else (),
            core_hint=data.draw(st.none() | st.integers(1, 8)),
            latency_hint=data.draw(st.none() | st.sampled_from([0.05, 1.25, 2.0])),
            selectivity_hint=data.draw(st.none() | st.sampled_from([0.0, 0.5, 1.0, 3.0])),
        ))
    g = DataflowGraph("rt", tuple(pellets), _graph(ids, edges).edges, tuple(splits))
    once = parse_graph(serialize_graph(g))
    assert once == g
    assert parse_graph(serialize_graph(once)) == once


@settings(max_examples=50, deadline=None)
@given(dags())
def test_validate_is_pure(dag):
    g = _graph(*dag)
    snapshot = copy.deepcopy(g)
    first = validate_graph(g)
    second = validate_graph(g)
    assert g == snapshot
    assert [str(d) for d in first.diagnostics] == [str(d) for d in second.diagnostics]
