import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import DisjointSet

from artigen.graph_model import (
    ArticulationGraph,
    CapacityError,
    JointEdge,
    Layout,
    PartNode,
    decode,
    encode,
    graph_from_json,
    graph_to_json,
    has_cycle,
    project,
)
from artigen.synthdata import CATEGORIES, generate_object

L = Layout()


def two_part_graph():
    nodes = [
        PartNode(True, np.zeros(3), np.ones(3), np.zeros(8)),
        PartNode(True, np.array([1.0, 0, 0]), np.full(3, 0.5), np.arange(8.0)),
    ]
    edge = JointEdge(np.array([0, 0, 1.0]), np.array([1.0, 0, 0]), np.array([[0, 1.0], [0, 0.2]]))
    return ArticulationGraph(nodes, [(0, 1, edge)], "laptop")


def edge_block(x, i, j):
    return L.split(torch.as_tensor(x))[1][L.pair_index[(i, j)]]


def test_layout_dimensions():
    assert L.node_dim == 15 and L.edge_dim == 13
    assert L.dim == 8 * 15 + 28 * 13
    assert L.pairs[0] == (0, 1) and L.pairs[-1] == (6, 7)


def test_encode_empty_graph():
    x = encode(ArticulationGraph([], []))
    nodes, edges = L.split(torch.from_numpy(x))
    assert torch.all(nodes[:, 0] == -1) and torch.all(nodes[:, 1:] == 0)
    assert torch.all(edges[:, :3] == torch.tensor([0.0, 1.0, 0.0]))


def test_encode_parent_first_edge_is_plus_one():
    x = encode(two_part_graph())
    assert edge_block(x, 0, 1)[:3].tolist() == [0.0, 0.0, 1.0]


def test_encode_reversed_edge_is_minus_one():
    g = two_part_graph()
    p, c, e = g.tree_edges[0]
    g.tree_edges = [(c, p, e)]
    assert edge_block(encode(g), 0, 1)[:3].tolist() == [1.0, 0.0, 0.0]


def test_encode_capacity():
    nodes = [PartNode(True, np.zeros(3), np.ones(3), np.zeros(8)) for _ in range(9)]
    with pytest.raises(CapacityError):
        encode(ArticulationGraph(nodes, []))


@pytest.mark.parametrize("category", CATEGORIES)
def test_roundtrip_generated(category):
    for seed in range(5):
        g = generate_object(category, np.random.default_rng(seed))
        d = decode(encode(g), category=category)
        assert [n.exists for n in d.nodes[: len(g.nodes)]] == [True] * len(g.nodes)
        for a, b in zip(g.nodes, d.nodes):
            np.testing.assert_array_equal(a.t, b.t)
            np.testing.assert_array_equal(a.b, b.b)
            np.testing.assert_array_equal(a.s, b.s)
        assert sorted((p, c) for p, c, _ in g.tree_edges) == sorted((p, c) for p, c, _ in d.tree_edges)
        ref = {(p, c): e for p, c, e in g.tree_edges}
        for p, c, e in d.tree_edges:
            np.testing.assert_allclose(e.l, ref[(p, c)].l, atol=1e-15)
            np.testing.assert_allclose(e.m, ref[(p, c)].m, atol=1e-15)
            np.testing.assert_array_equal(e.limits, ref[(p, c)].limits)


def _with_edge(l, m, limits=((0, 1), (0, 1))):
    x = encode(two_part_graph())
    nodes, edges = L.split(torch.from_numpy(x))
    e = L.pair_index[(0, 1)]
    edges[e, 3:6] = torch.tensor(l, dtype=torch.float64)
    edges[e, 6:9] = torch.tensor(m, dtype=torch.float64)
    edges[e, 9:13] = torch.tensor(limits, dtype=torch.float64).reshape(4)
    return L.join(nodes, edges)


def test_project_on_manifold_is_unchanged():
    x = _with_edge([0, 0, 1], [1, 0, 0])
    torch.testing.assert_close(edge_block(project(x), 0, 1), edge_block(x, 0, 1), rtol=0, atol=0)


def test_project_normalizes_and_orthogonalizes():
    blk = edge_block(project(_with_edge([0, 0, 2], [0, 0, 1])), 0, 1)
    assert blk[3:6].tolist() == [0.0, 0.0, 1.0]
    assert blk[6:9].tolist() == [0.0, 0.0, 0.0]


def test_project_zero_direction_fallback():
    blk = edge_block(project(_with_edge([0, 0, 0], [0.3, 0, 0])), 0, 1)
    assert blk[3:6].tolist() == [0.0, 0.0, 1.0]


def test_project_orders_limits_and_clamps_bbox():
    x = _with_edge([1, 0, 0], [0, 0, 0], ((1.0, -1.0), (0.5, 0.2)))
    nodes, edges = L.split(x)
    nodes[0, 4] = -3.0
    out = project(L.join(nodes, edges))
    blk = edge_block(out, 0, 1)
    assert blk[9:13].tolist() == [-1.0, 1.0, 0.2, 0.5]
    assert float(L.split(out)[0][0, 4]) == pytest.approx(1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_project_idempotent_and_keeps_nodes(seed):
    x = torch.from_numpy(np.random.default_rng(seed).normal(size=(3, L.dim)) * 2)
    p = project(x)
    torch.testing.assert_close(project(p), p, rtol=0, atol=1e-12)
    f = L.unpack(p)
    assert torch.all(torch.abs(torch.linalg.vector_norm(f["l"], dim=-1) - 1) < 1e-9)
    assert torch.all(torch.abs((f["l"] * f["m"]).sum(-1)) < 1e-9)
    n_raw, n_proj = L.split(x)[0], L.split(p)[0]
    keep = torch.ones(L.node_dim, dtype=torch.bool)
    keep[4:7] = False
    torch.testing.assert_close(n_proj[..., keep], n_raw[..., keep], rtol=0, atol=0)
    torch.testing.assert_close(n_proj[..., 4:7], n_raw[..., 4:7].clamp(min=1e-3), rtol=0, atol=0)


def _scored(K, scores):
    """Latent with K existing nodes and given (c-1, c0, c+1) per edge."""
    layout = Layout(K=K)
    x = np.zeros(layout.dim)
    nodes = x[: layout.node_size].reshape(K, -1)
    nodes[:, 0] = 1.0
    nodes[:, 4:7] = 1.0
    edges = x[layout.node_size :].reshape(layout.E, layout.edge_dim)
    edges[:, 1] = 1.0
    edges[:, 5] = 1.0
    for (i, j), c in scores.items():
        edges[layout.pair_index[(i, j)], :3] = c
    return x, layout


def test_decode_single_candidate_edge():
    x, layout = _scored(2, {(0, 1): (0, 0, 1)})
    g = decode(x, layout)
    assert [(p, c) for p, c, _ in g.tree_edges] == [(0, 1)]


def test_decode_kruskal_triangle():
    x, layout = _scored(3, {(0, 1): (0, 0, 3), (0, 2): (0, 0, 2), (1, 2): (0, 0, 1)})
    g = decode(x, layout)
    assert sorted((p, c) for p, c, _ in g.tree_edges) == [(0, 1), (0, 2)]


def test_decode_direction_minus_one_makes_higher_index_parent():
    x, layout = _scored(2, {(0, 1): (2, 0, 1)})
    assert [(p, c) for p, c, _ in decode(x, layout).tree_edges] == [(1, 0)]


def test_decode_single_node_and_empty():
    x, layout = _scored(1, {})
    assert decode(x, layout).tree_edges == []
    g = decode(-np.ones(L.dim))
    assert not any(n.exists for n in g.nodes) and g.tree_edges == []


def test_decode_ignores_edges_to_absent_nodes():
    x, layout = _scored(3, {(0, 1): (0, 0, 1), (1, 2): (0, 0, 5)})
    x[2 * layout.node_dim] = 0.2
    g = decode(x, layout)
    assert [(p, c) for p, c, _ in g.tree_edges] == [(0, 1)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decode_never_has_cycles(seed):
    x = project(torch.from_numpy(np.random.default_rng(seed).normal(size=L.dim)))
    g = decode(x.numpy())
    assert not has_cycle(g)
    ds = DisjointSet(range(L.K))
    for p, c, _ in g.tree_edges:
        assert g.nodes[p].exists and g.nodes[c].exists
        assert not ds.connected(p, c)
        ds.merge(p, c)


def test_json_roundtrip_and_schema():
    g = two_part_graph()
    text = graph_to_json(g)
    doc = json.loads(text)
    assert list(doc) == ["category", "nodes", "edges"]
    assert list(doc["nodes"][0]) == ["exists", "t", "b", "s"]
    assert list(doc["edges"][0]) == ["parent", "child", "l", "m", "limits"]
    back = graph_from_json(text)
    assert graph_to_json(back) == text
    assert back.category == "laptop"


def test_json_nine_significant_digits():
    g = two_part_graph()
    g.nodes[0].t = np.array([1 / 3, 0.0, 0.0])
    doc = json.loads(graph_to_json(g))
    assert doc["nodes"][0]["t"][0] == 0.333333333
