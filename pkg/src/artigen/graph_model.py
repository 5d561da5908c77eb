"""Articulation graph types, flat latent layout, projection and decoding.

A latent vector holds ``K`` node blocks followed by ``K(K-1)/2`` edge blocks in
row-major upper-triangular order.  Node block: ``[o, t(3), b(3), s(F)]``.
Edge block: ``[c(3), l(3), m(3), rho(4)]`` where ``c`` is the one-hot class
score over ``(-1, 0, +1)`` and ``rho`` is ``[gmin, gmax, dmin, dmax]``.

Edge class ``+1`` on block ``(i, j)`` (``i < j``) makes ``i`` the parent, ``-1``
makes ``j`` the parent.  Joint axes are expressed in the parent's local frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch
from scipy.cluster.hierarchy import DisjointSet
from torch import Tensor

DEFAULT_K = 8
DEFAULT_F = 8
EDGE_DIM = 13
MIN_BBOX = 1e-3
NODE_EXISTS_THRESHOLD = 0.5


class CapacityError(ValueError):
    pass


@dataclass
class PartNode:
    exists: bool
    t: np.ndarray
    b: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(3)
        self.s = np.asarray(self.s, dtype=np.float64).reshape(-1)


@dataclass
class JointEdge:
    l: np.ndarray
    m: np.ndarray
    limits: np.ndarray
    existence: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64).reshape(3)
        self.m = np.asarray(self.m, dtype=np.float64).reshape(3)
        self.limits = np.asarray(self.limits, dtype=np.float64).reshape(2, 2)
        self.existence = np.asarray(self.existence, dtype=np.float64).reshape(3)


@dataclass
class ArticulationGraph:
    nodes: list[PartNode]
    tree_edges: list[tuple[int, int, JointEdge]] = field(default_factory=list)
    category: str | None = None

    @property
    def existing(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.exists]

    def children(self, parent: int) -> list[tuple[int, JointEdge]]:
        return [(c, e) for p, c, e in self.tree_edges if p == parent]

    def roots(self) -> list[int]:
        child_set = {c for _, c, _ in self.tree_edges}
        return [i for i in self.existing if i not in child_set]

    def to_json(self) -> str:
        return graph_to_json(self)

    @classmethod
    def from_json(cls, text: str) -> "ArticulationGraph":
        return graph_from_json(text)


class Layout:
    """Index bookkeeping for the flat latent of a ``(K, F)`` graph."""

    def __init__(self, K: int = DEFAULT_K, F: int = DEFAULT_F):
        if K < 1 or F < 1:
            raise ValueError("K and F must be positive")
        self.K = K
        self.F = F
        self.node_dim = 7 + F
        self.edge_dim = EDGE_DIM
        self.pairs = [(i, j) for i in range(K) for j in range(i + 1, K)]
        self.E = len(self.pairs)
        self.node_size = K * self.node_dim
        self.dim = self.node_size + self.E * self.edge_dim

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and (self.K, self.F) == (other.K, other.F)

    def __repr__(self) -> str:
        return f"Layout(K={self.K}, F={self.F})"

    @cached_property
    def pair_index(self) -> dict[tuple[int, int], int]:
        return {p: e for e, p in enumerate(self.pairs)}

    @cached_property
    def pair_array(self) -> np.ndarray:
        return np.array(self.pairs, dtype=np.int64).reshape(-1, 2)

    def split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(nodes (..., K, D_v), edges (..., E, D_e))`` views."""
        lead = x.shape[:-1]
        nodes = x[..., : self.node_size].reshape(*lead, self.K, self.node_dim)
        edges = x[..., self.node_size :].reshape(*lead, self.E, self.edge_dim)
        return nodes, edges

    def join(self, nodes: Tensor, edges: Tensor) -> Tensor:
        lead = nodes.shape[:-2]
        return torch.cat([nodes.reshape(*lead, -1), edges.reshape(*lead, -1)], dim=-1)

    def unpack(self, x: Tensor) -> dict[str, Tensor]:
        nodes, edges = self.split(x)
        return {
            "o": nodes[..., 0],
            "t": nodes[..., 1:4],
            "b": nodes[..., 4:7],
            "s": nodes[..., 7:],
            "c": edges[..., 0:3],
            "l": edges[..., 3:6],
            "m": edges[..., 6:9],
            "rho": edges[..., 9:13].reshape(*edges.shape[:-1], 2, 2),
        }


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def encode(graph: ArticulationGraph, K: int = DEFAULT_K, F: int = DEFAULT_F) -> np.ndarray:
    """Flatten ``graph`` into a latent vector of the ``(K, F)`` layout."""
    layout = Layout(K, F)
    if len(graph.nodes) > K:
        raise CapacityError(f"graph has {len(graph.nodes)} parts, capacity is {K}")
    x = np.zeros(layout.dim)
    nodes = x[: layout.node_size].reshape(K, layout.node_dim)
    edges = x[layout.node_size :].reshape(layout.E, layout.edge_dim)
    nodes[:, 0] = -1.0
    edges[:, 1] = 1.0
    for i, node in enumerate(graph.nodes):
        if not node.exists:
            continue
        if node.s.shape[0] != F:
            raise ValueError(f"shape latent has length {node.s.shape[0]}, expected {F}")
        nodes[i, 0] = 1.0
        nodes[i, 1:4] = node.t
        nodes[i, 4:7] = node.b
        nodes[i, 7:] = node.s
    for parent, child, joint in graph.tree_edges:
        if parent == child:
            raise ValueError("self-loop edge")
        i, j = min(parent, child), max(parent, child)
        row = edges[layout.pair_index[(i, j)]]
        row[0:3] = 0.0
        row[2 if parent == i else 0] = 1.0
        row[3:6] = joint.l
        row[6:9] = joint.m
        row[9:13] = joint.limits.reshape(4)
    return x


def project(x, layout: Layout | None = None) -> Tensor:
    """Map a raw latent onto the valid-graph manifold.

    Normalizes Plücker directions (fallback ``(0, 0, 1)``), removes the moment
    component along the direction, orders the joint limits and clamps bbox
    extents below at ``1e-3``.  Differentiable almost everywhere; accepts any
    leading batch shape.
    """
    x = _as_tensor(x)
    layout = layout or _infer_layout(x.shape[-1])
    nodes, edges = layout.split(x)

    b = nodes[..., 4:7].clamp(min=MIN_BBOX)
    nodes = torch.cat([nodes[..., :4], b, nodes[..., 7:]], dim=-1)

    l = edges[..., 3:6]
    m = edges[..., 6:9]
    norm = torch.linalg.vector_norm(l, dim=-1, keepdim=True)
    degenerate = norm < 1e-8
    safe_norm = torch.where(degenerate, torch.ones_like(norm), norm)
    fallback = torch.zeros_like(l)
    fallback[..., 2] = 1.0
    l = torch.where(degenerate, fallback, l / safe_norm)
    m = m - (l * m).sum(-1, keepdim=True) * l
    rho = edges[..., 9:13].reshape(*edges.shape[:-1], 2, 2)
    lo = torch.minimum(rho[..., 0], rho[..., 1])
    hi = torch.maximum(rho[..., 0], rho[..., 1])
    rho = torch.stack([lo, hi], dim=-1).reshape(*edges.shape[:-1], 4)
    edges = torch.cat([edges[..., 0:3], l, m, rho], dim=-1)
    return layout.join(nodes, edges)


def _infer_layout(dim: int) -> Layout:
    layout = Layout()
    if layout.dim != dim:
        raise ValueError(f"latent has dimension {dim}; pass an explicit Layout")
    return layout


def decode(x, layout: Layout | None = None, category: str | None = None) -> ArticulationGraph:
    """Threshold existences and extract a max-margin spanning forest."""
    x = _as_tensor(x).detach().to(torch.float64).cpu().numpy()
    if x.ndim != 1:
        raise ValueError("decode expects a single latent vector")
    layout = layout or _infer_layout(x.shape[0])
    nodes = x[: layout.node_size].reshape(layout.K, layout.node_dim)
    edges = x[layout.node_size :].reshape(layout.E, layout.edge_dim)

    parts = [
        PartNode(bool(row[0] > NODE_EXISTS_THRESHOLD), row[1:4], row[4:7], row[7:])
        for row in nodes
    ]
    candidates = []
    for e, (i, j) in enumerate(layout.pairs):
        if not (parts[i].exists and parts[j].exists):
            continue
        c = edges[e, 0:3]
        score = max(c[0], c[2])
        if score > c[1]:
            candidates.append((-(score - c[1]), i, j, e))
    candidates.sort()

    forest = DisjointSet(range(layout.K))
    tree = []
    for _, i, j, e in candidates:
        if forest.connected(i, j):
            continue
        forest.merge(i, j)
        row = edges[e]
        c = row[0:3]
        parent, child = (j, i) if c[0] > c[2] else (i, j)
        joint = JointEdge(row[3:6], row[6:9], row[9:13].reshape(2, 2), existence=c)
        tree.append((parent, child, joint))
    return ArticulationGraph(parts, tree, category)


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def _f9(v: float) -> float:
    return float(f"{float(v):.9g}")


def _vec(a) -> list[float]:
    return [_f9(v) for v in np.asarray(a).reshape(-1)]


def graph_to_json(graph: ArticulationGraph) -> str:
    doc = {
        "category": graph.category,
        "nodes": [
            {"exists": bool(n.exists), "t": _vec(n.t), "b": _vec(n.b), "s": _vec(n.s)}
            for n in graph.nodes
        ],
        "edges": [
            {
                "parent": int(p),
                "child": int(c),
                "l": _vec(e.l),
                "m": _vec(e.m),
                "limits": [_vec(e.limits[0]), _vec(e.limits[1])],
            }
            for p, c, e in graph.tree_edges
        ],
    }
    return json.dumps(doc, indent=1)


def graph_from_json(text: str) -> ArticulationGraph:
    doc = json.loads(text)
    nodes = [PartNode(bool(n["exists"]), n["t"], n["b"], n["s"]) for n in doc["nodes"]]
    edges = [
        (int(e["parent"]), int(e["child"]), JointEdge(e["l"], e["m"], e["limits"]))
        for e in doc["edges"]
    ]
    return ArticulationGraph(nodes, edges, doc.get("category"))


def has_cycle(graph: ArticulationGraph) -> bool:
    ds = DisjointSet(range(len(graph.nodes)))
    for p, c, _ in graph.tree_edges:
        if ds.connected(p, c):
            return True
        ds.merge(p, c)
    return False
