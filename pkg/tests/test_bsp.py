import pytest

from pelletflow.bsp import BspManager, BspMaxVertex, bsp_max_graph
from pelletflow.graph import validate_graph

from fixtures import bsp_checks, diameter, random_connected_graph, run_bsp


def test_graph_shape():
    g = bsp_max_graph(4)
    assert validate_graph(g).ok
    assert sorted(g.pellet_ids()) == ["M", "W0", "W1", "W2", "W3"]
    assert all(g.split_mode(f"W{i}", "msg") == "key_hash" for i in range(4))


@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("mode", ["deterministic", "threaded"])
def test_max_propagation(seed, mode):
    adj, values = random_connected_graph(20, 8, seed)
    df, got = run_bsp(adj, values, mode=mode)
    assert got == {v: max(values.values()) for v in adj}
    steps, violations = bsp_checks(df)
    assert steps is not None and steps <= diameter(adj) + 1
    assert violations == []


def test_path_graph_needs_diameter_rounds():
    n = 8
    adj = {f"v{i}": [f"v{j}" for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)}
    values = {f"v{i}": i for i in range(n)}
    df, got = run_bsp(adj, values)
    assert set(got.values()) == {n - 1}
    steps, violations = bsp_checks(df)
    assert steps == diameter(adj) + 1 and not violations


def test_single_isolated_vertex_halts():
    df, got = run_bsp({"v0": []}, {"v0": 5}, n_workers=2)
    assert got == {"v0": 5}
    assert bsp_checks(df)[0] == 0


def test_vertex_ignores_landmarks_and_other_control():
    from pelletflow.message import control, landmark

    v = BspMaxVertex("W0", {"a": []}, {"a": 1})

    class Ctx:
        def __init__(self):
            self.out = []

        def emit(self, port, msg, key=None):
            self.out.append((port, msg))

        def log(self, *_a, **_k):
            pass

    ctx = Ctx()
    v.on_signal(landmark("w"), ctx)
    v.on_signal(control("other"), ctx)
    assert ctx.out == []
    v.on_signal(control("terminate"), ctx)
    assert v.halted
    assert BspManager(["W0"]).barrier.expected == frozenset({"W0"})
