"""Evaluation metrics for generated articulated objects.

Guidance metrics score one decoded graph: point-cloud residuals (``E_pc``,
``D_pc``), penetration between parts (``E_pen``) and penetration under
articulation (``E_mob``).  Generative metrics compare sets of objects through
pairwise Chamfer distances of posed surface samples.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .graph_model import ArticulationGraph, Layout, encode
from .guidance import edge_penetration, pair_penetration
from .kinematics import child_to_parent
from .shape_sdf import Mesh, extract_mesh, merge_meshes, sdf_world

N_STAR = 1000
MOBILITY_STATES = 5


class MetricError(ValueError):
    """Metric undefined for the given input."""


class ExtractionError(RuntimeError):
    """Marching cubes produced no surface for any part."""


def _points(P) -> np.ndarray:
    pts = np.asarray(getattr(P, "points", P), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise MetricError("empty point cloud")
    return pts


def _existing(graph: ArticulationGraph):
    nodes = [n for n in graph.nodes if n.exists]
    if not nodes:
        raise MetricError("graph has no existing part")
    return nodes


# --------------------------------------------------------------------------
# point cloud alignment
# --------------------------------------------------------------------------


def metric_epc(graph: ArticulationGraph, P) -> float:
    """Mean over points of the squared SDF to the closest existing part."""
    pts = torch.from_numpy(_points(P))
    with torch.no_grad():
        d = torch.stack([sdf_world(pts, n) for n in _existing(graph)], dim=1)
    return float((d * d).min(dim=1).values.mean())


def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle ``abc`` to ``p``; all arrays ``(N, 3)``."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        out = a + v[:, None] * ab + w[:, None] * ac  # interior

        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    # Voronoi regions, later assignments take priority in reverse order of tests
    edge_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(edge_bc[:, None], b + t_bc[:, None] * (c - b), out)
    edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(edge_ac[:, None], a + t_ac[:, None] * ac, out)
    vert_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(vert_c[:, None], c, out)
    edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(edge_ab[:, None], a + t_ab[:, None] * ab, out)
    vert_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(vert_b[:, None], b, out)
    vert_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(vert_a[:, None], a, out)
    return out


def mesh_distances(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Exact unsigned distance of each point to a triangle mesh.

    A KD-tree over triangle centroids gives an upper bound from the nearest
    centroid's triangle; only triangles whose bounding sphere can beat the
    bound are tested exactly.
    """
    tri = mesh.vertices[mesh.faces]  # (T, 3, 3)
    cent = tri.mean(axis=1)
    radius = np.linalg.norm(tri - cent[:, None], axis=2).max()
    tree = cKDTree(cent)
    _, near = tree.query(points)
    ub = np.linalg.norm(points - closest_on_triangles(points, *(tri[near, k] for k in range(3))), axis=1)
    out = ub.copy()
    cands = tree.query_ball_point(points, ub + radius + 1e-12)
    idx_p = np.repeat(np.arange(len(points)), [len(c) for c in cands])
    idx_t = np.concatenate([np.asarray(c, dtype=np.int64) for c in cands]) if len(idx_p) else np.zeros(0, np.int64)
    for s in range(0, len(idx_p), 200_000):
        ip, it = idx_p[s : s + 200_000], idx_t[s : s + 200_000]
        q = points[ip]
        d = np.linalg.norm(q - closest_on_triangles(q, tri[it, 0], tri[it, 1], tri[it, 2]), axis=1)
        np.minimum.at(out, ip, d)
    return out


def object_mesh(graph: ArticulationGraph, resolution: int = 32) -> Mesh:
    return merge_meshes([extract_mesh(n, resolution) for n in _existing(graph)])


def metric_dpc(graph: ArticulationGraph, P, resolution: int = 32) -> float:
    """Mean distance from the points to the marching-cubes mesh of the object."""
    pts = _points(P)
    mesh = object_mesh(graph, resolution)
    if mesh.empty:
        raise ExtractionError("failed mesh extraction")
    return float(mesh_distances(pts, mesh).mean())


# --------------------------------------------------------------------------
# penetration
# --------------------------------------------------------------------------


def _graph_latent(graph: ArticulationGraph) -> tuple[torch.Tensor, Layout]:
    F = next((len(n.s) for n in graph.nodes if n.exists), 8)
    layout = Layout(max(8, len(graph.nodes)), F)
    return torch.from_numpy(encode(graph, layout.K, layout.F))[None], layout


def metric_epen(graph: ArticulationGraph, n_star: int = N_STAR) -> float:
    """Unweighted penetration over all pairs of existing parts."""
    x, layout = _graph_latent(graph)
    with torch.no_grad():
        val = pair_penetration(x, layout, n_star, lambda oi, oj: ((oi > 0.5) & (oj > 0.5)).to(oi.dtype))
    return float(val[0])


def metric_emob(graph: ArticulationGraph, n_star: int = N_STAR, n_states: int = MOBILITY_STATES) -> float:
    """Penetration summed over tree edges at equally spaced joint states."""
    x, layout = _graph_latent(graph)
    mask = torch.zeros(1, layout.E, dtype=torch.bool)
    parent_first = torch.ones(1, layout.E, dtype=torch.bool)
    for parent, child, _ in graph.tree_edges:
        if not (graph.nodes[parent].exists and graph.nodes[child].exists):
            continue
        e = layout.pair_index[(min(parent, child), max(parent, child))]
        mask[0, e] = True
        parent_first[0, e] = parent < child
    if not bool(mask.any()):
        return 0.0
    frac = torch.linspace(0.0, 1.0, n_states, dtype=torch.float64) if n_states > 1 else torch.zeros(1, dtype=torch.float64)
    fractions = frac[:, None].expand(n_states, 2).expand(1, layout.E, n_states, 2)
    with torch.no_grad():
        val = edge_penetration(x, layout, n_star, fractions, mask, mask.to(torch.float64), parent_first)
    return float(val[0])


# --------------------------------------------------------------------------
# posing and surface sampling
# --------------------------------------------------------------------------


def part_poses(graph: ArticulationGraph, states: dict[tuple[int, int], np.ndarray]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """World pose ``(R, t)`` of each part's centred frame under joint ``states``.

    Missing states default to zero articulation.  Parts not reachable from a
    root keep their rest pose.
    """
    poses = {}

    def visit(i: int, R: np.ndarray, t: np.ndarray) -> None:
        poses[i] = (R, t)
        for c, joint in graph.children(i):
            gamma, d = states.get((i, c), np.zeros(2))
            Rc, tc = child_to_parent(
                torch.from_numpy(joint.l), torch.from_numpy(joint.m),
                torch.tensor(float(gamma), dtype=torch.float64), torch.tensor(float(d), dtype=torch.float64),
                torch.from_numpy(graph.nodes[i].t), torch.from_numpy(graph.nodes[c].t),
            )
            visit(c, R @ Rc.numpy(), R @ tc.numpy() + t)

    for r in graph.roots():
        visit(r, np.eye(3), np.asarray(graph.nodes[r].t, dtype=np.float64))
    for i, n in enumerate(graph.nodes):
        poses.setdefault(i, (np.eye(3), np.asarray(n.t, dtype=np.float64)))
    return poses


def posed_mesh(graph: ArticulationGraph, states: dict, resolution: int = 32, cache: dict | None = None) -> Mesh:
    poses = part_poses(graph, states)
    meshes = []
    for i, n in enumerate(graph.nodes):
        if not n.exists:
            continue
        m = cache[i] if cache is not None and i in cache else extract_mesh(n, resolution)
        if cache is not None:
            cache[i] = m
        if m.empty:
            continue
        R, t = poses[i]
        meshes.append(Mesh(m.vertices - n.t, m.faces).transformed(R, t))
    return merge_meshes(meshes)


def sample_surface(mesh: Mesh, n: int, seed: int | None = None) -> np.ndarray:
    """Area-weighted surface samples; seeded from the mesh bytes by default."""
    if mesh.empty:
        raise ExtractionError("cannot sample an empty mesh")
    if seed is None:
        h = hashlib.sha256(mesh.vertices.tobytes() + mesh.faces.tobytes()).digest()
        seed = int.from_bytes(h[:8], "little")
    rng = np.random.default_rng(seed)
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(tri), size=n, p=area / area.sum())
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u, v = np.where(flip, 1 - u, u), np.where(flip, 1 - v, v)
    t = tri[pick]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


# --------------------------------------------------------------------------
# generative metrics
# --------------------------------------------------------------------------


def chamfer(A, B) -> float:
    """Mean nearest squared distance, summed over both directions."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if len(A) == 0 or len(B) == 0:
        raise MetricError("chamfer distance of an empty set")
    dab, _ = cKDTree(B).query(A)
    dba, _ = cKDTree(A).query(B)
    return float(np.mean(dab**2) + np.mean(dba**2))


def chamfer_matrix(X: list[np.ndarray], Y: list[np.ndarray]) -> np.ndarray:
    trees_x = [cKDTree(x) for x in X]
    trees_y = [cKDTree(y) for y in Y]
    D = np.empty((len(X), len(Y)))
    for i, x in enumerate(X):
        for j, y in enumerate(Y):
            dxy, _ = trees_y[j].query(x)
            dyx, _ = trees_x[i].query(y)
            D[i, j] = np.mean(dxy**2) + np.mean(dyx**2)
    return D


def mmd_cov(D_sr: np.ndarray) -> tuple[float, float]:
    """MMD and coverage from a samples-by-reference distance matrix."""
    mmd = float(D_sr.min(axis=0).mean())
    cov = len(np.unique(D_sr.argmin(axis=1))) / D_sr.shape[1]
    return mmd, float(cov)


def one_nna(D_ss: np.ndarray, D_rr: np.ndarray, D_sr: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy; ties go to the opposite set."""
    def accuracy(same: np.ndarray, cross: np.ndarray) -> np.ndarray:
        same = same.astype(np.float64, copy=True)
        np.fill_diagonal(same, np.inf)
        return same.min(axis=1) < cross.min(axis=1)

    correct = np.concatenate([accuracy(D_ss, D_sr), accuracy(D_rr, D_sr.T)])
    return float(correct.mean())


@dataclass
class GenerativeReport:
    mmd: float
    cov: float
    one_nna: float
    per_state: list[dict] = field(default_factory=list)
    failed_samples: int = 0
    failed_reference: int = 0

    def to_dict(self) -> dict:
        return {
            "MMD": self.mmd, "COV": self.cov, "1-NNA": self.one_nna,
            "per_state": self.per_state,
            "failed_samples": self.failed_samples, "failed_reference": self.failed_reference,
        }


def draw_shared_states(K: int, rng: np.random.Generator) -> dict[tuple[int, int], np.ndarray]:
    """Joint-limit fractions per unordered slot pair, shared across objects."""
    return {(i, j): rng.uniform(size=2) for i in range(K) for j in range(i + 1, K)}


def apply_fractions(graph: ArticulationGraph, fractions: dict) -> dict[tuple[int, int], np.ndarray]:
    states = {}
    for p, c, joint in graph.tree_edges:
        lo = joint.limits.min(axis=1)
        hi = joint.limits.max(axis=1)
        states[(p, c)] = lo + fractions[(min(p, c), max(p, c))] * (hi - lo)
    return states


def _surface_sets(graphs, fractions, n_points, resolution, caches):
    clouds, ok = [], []
    for g, cache in zip(graphs, caches):
        try:
            mesh = posed_mesh(g, apply_fractions(g, fractions), resolution, cache)
            if mesh.empty:
                raise ExtractionError("empty mesh")
            clouds.append(sample_surface(mesh, n_points))
            ok.append(True)
        except (ExtractionError, MetricError):
            ok.append(False)
    return clouds, ok


def generative_metrics(
    samples: list[ArticulationGraph],
    reference: list[ArticulationGraph],
    S: int = 4,
    rng: np.random.Generator | None = None,
    n_points: int = 2048,
    resolution: int = 32,
) -> GenerativeReport:
    """MMD, COV and 1-NNA over ``S`` shared articulation-state draws.

    Per metric the best value over draws is kept: smallest MMD, largest COV
    and the 1-NNA closest to 0.5.
    """
    if not samples or not reference:
        raise MetricError("generative metrics need nonempty sets")
    rng = rng if rng is not None else np.random.default_rng(0)
    K = max(len(g.nodes) for g in list(samples) + list(reference))
    s_cache = [dict() for _ in samples]
    r_cache = [dict() for _ in reference]
    per_state = []
    failed_s = failed_r = 0
    for _ in range(S):
        fractions = draw_shared_states(K, rng)
        Xs, ok_s = _surface_sets(samples, fractions, n_points, resolution, s_cache)
        Xr, ok_r = _surface_sets(reference, fractions, n_points, resolution, r_cache)
        failed_s = max(failed_s, ok_s.count(False))
        failed_r = max(failed_r, ok_r.count(False))
        if not Xs or not Xr:
            raise ExtractionError("every object in a set failed mesh extraction")
        D_sr = chamfer_matrix(Xs, Xr)
        mmd, cov = mmd_cov(D_sr)
        nna = one_nna(chamfer_matrix(Xs, Xs), chamfer_matrix(Xr, Xr), D_sr)
        per_state.append({"MMD": mmd, "COV": cov, "1-NNA": nna})
    return GenerativeReport(
        mmd=min(p["MMD"] for p in per_state),
        cov=max(p["COV"] for p in per_state),
        one_nna=min((p["1-NNA"] for p in per_state), key=lambda v: abs(v - 0.5)),
        per_state=per_state,
        failed_samples=failed_s,
        failed_reference=failed_r,
    )


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

SAMPLE_COLUMNS = ["id", "E_pc", "D_pc", "E_pen", "E_mob"]


def sample_metrics(graph: ArticulationGraph, P=None, resolution: int = 32) -> dict:
    row = {"E_pen": metric_epen(graph), "E_mob": metric_emob(graph)}
    if P is not None:
        row["E_pc"] = metric_epc(graph, P)
        try:
            row["D_pc"] = metric_dpc(graph, P, resolution)
        except ExtractionError:
            row["D_pc"] = None
    return row


def per_sample_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, SAMPLE_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]))
                    for k in SAMPLE_COLUMNS})
    return buf.getvalue()


def summarize(rows: list[dict]) -> dict:
    out = {}
    for k in SAMPLE_COLUMNS[1:]:
        vals = [r[k] for r in rows if r.get(k) is not None]
        if vals:
            out[k] = {"median": float(np.median(vals)), "mean": float(np.mean(vals)), "n": len(vals)}
    failed = sum(1 for r in rows if "D_pc" in r and r["D_pc"] is None)
    if failed:
        out["failed_mesh_extraction"] = failed
    return out


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def report_table(report: dict) -> str:
    """Aligned two-column text rendering of a flat or nested report."""
    rows = []

    def walk(prefix: str, v) -> None:
        if isinstance(v, dict):
            for k in sorted(v):
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif isinstance(v, list):
            rows.append((prefix, f"[{len(v)} entries]"))
        else:
            rows.append((prefix, f"{v:.6g}" if isinstance(v, float) else str(v)))

    walk("", report)
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"
