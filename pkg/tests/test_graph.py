import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphgen import random_graph
from sparsenn.errors import CorruptionError, CycleError, FormatError, UnsupportedError
from sparsenn.graph import (
    Act, Graph, Kind, LayerSpec, REFERENCE_MODELS, build_reference_graph, count_layers, densify_graph, dumps,
    layer_breakdown, load_model, loads, save_model, sparsify_graph, topological_order, validate_graph,
)
from sparsenn.graph.zoo import GraphBuilder
from sparsenn.tensor import Layout, Tensor, csr_from_dense


def _conv_graph(w_shape=(4, 3, 3, 3)):
    nodes = [
        LayerSpec(0, Kind.INPUT, {"shape": (1, 3, 8, 8)}),
        LayerSpec(1, Kind.CONV2D, dict(in_channels=3, out_channels=4, kernel_h=3, kernel_w=3, stride=1, padding=1),
                  weights=Tensor(np.ones(w_shape, np.float32), Layout.NCHW)),
    ]
    return Graph(nodes, [(0, 1)], [0], [1])


def rules(g):
    return {d.rule for d in validate_graph(g)}


# -- validation --------------------------------------------------------------

def test_single_conv_is_valid():
    assert validate_graph(_conv_graph()) == []


def test_wrong_weight_shape_reported():
    assert "weight-shape" in rules(_conv_graph((4, 2, 3, 3)))


def test_add_with_one_predecessor_is_arity_error():
    g = _conv_graph()
    g.nodes.append(LayerSpec(2, Kind.ADD))
    g.edges.append((1, 2))
    g.outputs = [2]
    diags = validate_graph(g)
    assert any(d.rule == "arity" and d.node_id == 2 for d in diags)


def test_two_node_cycle_reported():
    act = {"act": int(Act.RELU)}
    g = Graph([LayerSpec(0, Kind.ACTIVATION, act), LayerSpec(1, Kind.ACTIVATION, act)], [(0, 1), (1, 0)], [], [1])
    assert "cycle" in rules(g)
    with pytest.raises(CycleError):
        topological_order(g)


def test_dangling_edge_and_duplicate_id():
    g = _conv_graph()
    g.edges.append((1, 9))
    g.nodes.append(LayerSpec(1, Kind.ACTIVATION, {"act": 1}))
    assert {"dangling-edge", "duplicate-id"} <= rules(g)


def test_shape_inference_failure_names_node():
    g = _conv_graph()
    g.nodes.append(LayerSpec(2, Kind.POOL, {"pool": 0, "window": 20, "stride": 1}))
    g.edges.append((1, 2))
    g.outputs = [2]
    diags = [d for d in validate_graph(g) if d.rule == "shape-inference"]
    assert diags and diags[0].node_id == 2


# -- topological order ---------------------------------------------------------

def _act_nodes(ids):
    return [LayerSpec(i, Kind.ACTIVATION, {"act": 1}) for i in ids]


def test_chain_order():
    g = Graph(_act_nodes([2, 0, 1]), [(0, 1), (1, 2)])
    assert topological_order(g) == [0, 1, 2]


def test_diamond_tie_break_by_id():
    g = Graph(_act_nodes([0, 2, 1, 3]), [(0, 2), (0, 1), (1, 3), (2, 3)])
    assert topological_order(g) == [0, 1, 2, 3]


@given(st.integers(2, 15), st.lists(st.tuples(st.integers(0, 14), st.integers(0, 14)), max_size=40),
       st.permutations(range(15)))
def test_random_dag_order_respects_edges(n, pairs, perm):
    # orient every pair along a hidden permutation so the graph is acyclic
    rank = {i: perm.index(i) for i in range(n)}
    edges = sorted({(a, b) if rank[a] < rank[b] else (b, a) for a, b in pairs if a < n and b < n and a != b})
    order = topological_order(Graph(_act_nodes(range(n)), edges))
    pos = {v: i for i, v in enumerate(order)}
    assert sorted(order) == list(range(n))
    assert all(pos[a] < pos[b] for a, b in edges)


# -- persistence ------------------------------------------------------------

def test_empty_graph_round_trips():
    g = Graph([LayerSpec(0, Kind.INPUT, {"shape": (1, 4)})], [], [0], [0])
    assert loads(dumps(g)) == g


def test_csr_fc_round_trips_exactly(rng):
    w = rng.standard_normal((6, 10)).astype(np.float32)
    w[rng.random(w.shape) < 0.7] = 0
    b = GraphBuilder()
    x = b.input((1, 10))
    b.graph.nodes.append(LayerSpec(1, Kind.FULLY_CONNECTED, dict(in_features=10, out_features=6),
                                   weights=csr_from_dense(w), bias=np.arange(6)))
    b.graph.edges.append((x, 1))
    g = Graph(b.graph.nodes, b.graph.edges, [0], [1])
    back = loads(dumps(g))
    s, t = g.node(1).weights, back.node(1).weights
    assert back == g
    assert s.row_ptr.tobytes() == t.row_ptr.tobytes()
    assert s.col_idx.tobytes() == t.col_idx.tobytes()
    assert s.values.tobytes() == t.values.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_random_graphs_round_trip(seed):
    g = random_graph(seed)
    blob = dumps(g)
    assert loads(blob) == g
    assert dumps(loads(blob)) == blob


def test_save_and_load(tmp_path):
    g = build_reference_graph("lenet5")
    save_model(g, tmp_path / "m.cadm")
    assert load_model(tmp_path / "m.cadm") == g


def test_truncated_model_is_corruption():
    blob = dumps(build_reference_graph("lenet_300_100"))
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptionError):
            loads(blob[:cut])


def test_bad_magic_and_trailing_bytes():
    blob = dumps(build_reference_graph("lenet_300_100"))
    with pytest.raises(FormatError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        loads(blob + b"\0")


# -- reference graphs ---------------------------------------------------------

def test_mobilenet_v1_layer_count():
    g = build_reference_graph("mobilenet_v1")
    assert count_layers(g) == 31
    kinds = layer_breakdown(g)
    assert kinds["CONV2D"] == 14 and kinds["DEPTHWISE_CONV2D"] == 13 and kinds["BATCHNORM"] == 27


def test_lenet_300_100_dims():
    g = build_reference_graph("lenet_300_100")
    fcs = [n.attrs for n in g.nodes if n.kind == Kind.FULLY_CONNECTED]
    assert [(a["in_features"], a["out_features"]) for a in fcs] == [(784, 300), (300, 100), (100, 10)]


@pytest.mark.parametrize("name", REFERENCE_MODELS)
def test_reference_graphs_validate(name):
    kw = {"resolution": 64} if name == "mobilenet_v1" else {}
    assert validate_graph(build_reference_graph(name, **kw)) == []


def test_unknown_reference_graph():
    with pytest.raises(UnsupportedError):
        build_reference_graph("resnet50")


def test_sparsify_then_densify():
    g = build_reference_graph("lenet5")
    s = sparsify_graph(g, 0.9)
    for node in s.nodes:
        if node.kind in (Kind.CONV2D, Kind.FULLY_CONNECTED):
            w = node.weights
            assert node.is_sparse and w.nnz == max(1, round(w.rows * w.cols * 0.1))
    d = densify_graph(s)
    assert validate_graph(d) == [] and not any(n.is_sparse for n in d.nodes)
    assert sparsify_graph(d, 0.9) == s
