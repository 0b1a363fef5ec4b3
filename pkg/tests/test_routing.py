import random
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from pelletflow.message import Message, control, data, landmark
from pelletflow.routing import (
    AlignBuffer, BarrierError, BarrierState, Route, RouteTable, RoutingError,
    align, barrier_step, key_hash_index, route, route_indices,
)


def table(mode, n):
    return RouteTable({("A", "out"): Route([(f"S{i}", "in") for i in range(n)], mode)})


def test_duplicate_fans_out():
    t = table("duplicate", 3)
    assert route(t, ("A", "out"), data(b"x")) == [("S0", "in"), ("S1", "in"), ("S2", "in")]


def test_round_robin_cursor():
    t = table("round_robin", 2)
    assert [route_indices(t, ("A", "out"), data(b"m%d" % i))[0] for i in range(4)] == [0, 1, 0, 1]


def test_key_hash_single_sink():
    t = table("key_hash", 1)
    assert route_indices(t, ("A", "out"), data(b"x", key=b"anything")) == [0]


def test_key_hash_needs_key():
    with pytest.raises(RoutingError):
        route(table("key_hash", 2), ("A", "out"), data(b"x"))


def test_signals_go_everywhere():
    for mode in ("round_robin", "key_hash"):
        t = table(mode, 3)
        assert len(route(t, ("A", "out"), landmark("w1"))) == 3
        assert len(route(t, ("A", "out"), control("c"))) == 3


def test_unknown_source():
    with pytest.raises(RoutingError):
        route(table("duplicate", 1), ("B", "out"), data(b"x"))


def test_key_hash_index_properties():
    keys = [b"k%d" % i for i in range(50)]
    assert len({key_hash_index(b"same", 5) for _ in range(3)}) == 1
    assert all(key_hash_index(k, 1) == 0 for k in keys)
    assert key_hash_index("abc", 7) == key_hash_index(b"abc", 7)


def test_key_hash_distribution():
    rng = random.Random(42)
    keys = [rng.randbytes(8) for _ in range(10_000)]
    counts = Counter(key_hash_index(k, 4) for k in keys)
    assert set(counts) == {0, 1, 2, 3}
    assert all(2200 <= c <= 2800 for c in counts.values()), counts


@given(st.binary(min_size=1, max_size=32), st.integers(1, 64))
def test_key_hash_in_range_and_stable(key, n):
    i = key_hash_index(key, n)
    assert 0 <= i < n
    assert key_hash_index(bytes(key), n) == i


def test_align_examples():
    buf = AlignBuffer(["a", "b"])
    buf.push("a", "m1")
    assert align(buf) is None
    buf.push("a", "m2")
    buf.push("b", "n1")
    assert align(buf) == {"a": "m1", "b": "n1"}
    assert align(buf) is None
    buf.push("b", "n2")
    assert align(buf) == {"a": "m2", "b": "n2"}
    assert len(buf) == 0


@given(st.lists(st.sampled_from("ab"), max_size=40))
def test_align_pairs_in_fifo_order(pushes):
    buf = AlignBuffer(["a", "b"])
    seen = {"a": 0, "b": 0}
    out = []
    for port in pushes:
        buf.push(port, (port, seen[port]))
        seen[port] += 1
        t = align(buf)
        if t:
            out.append(t)
    assert len(out) == min(seen.values())
    for i, t in enumerate(out):
        assert t == {"a": ("a", i), "b": ("b", i)}


def test_barrier_advance_and_terminate():
    st_ = BarrierState(frozenset({"p1", "p2"}))
    assert barrier_step(st_, control("done:p1")) is None
    adv = barrier_step(st_, control("done:p2"))
    assert adv.label == "start:1" and st_.superstep == 1
    assert barrier_step(st_, control("halt:p1")) is None
    assert barrier_step(st_, control("halt:p2")).label == "terminate"
    assert st_.halted


def test_barrier_mixed_votes_advance():
    st_ = BarrierState(frozenset({"p1", "p2"}))
    barrier_step(st_, control("halt:p1"))
    assert barrier_step(st_, control("done:p2")).label == "start:1"


@pytest.mark.parametrize("msg", [data(b"done:p1"), control("begin"), control("done:zz"), control("done:")])
def test_barrier_rejects(msg):
    with pytest.raises(BarrierError):
        barrier_step(BarrierState(frozenset({"p1"})), msg)


def test_barrier_duplicate_vote_ignored():
    st_ = BarrierState(frozenset({"p1", "p2"}))
    barrier_step(st_, control("done:p1"))
    assert barrier_step(st_, control("done:p1")) is None
    assert st_.superstep == 0


def test_message_validation():
    with pytest.raises(ValueError):
        Message(kind="weird")
    with pytest.raises(ValueError):
        landmark("")
    m = data(b"x").stamped("A", "out", 3)
    assert (m.source, m.port, m.seq) == ("A", "out", 3)
