"""Analytic part shapes: rounded boxes with a linear taper along z.

The unit frame maps the part bbox ``[-b/2, b/2]`` to ``[-1, 1]^3``.  World
queries are clamped to the bbox; outside points get the distance to the bbox
plus the SDF at the clamped point, so one expression covers both branches.
All SDF functions are torch ops and broadcast over leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from skimage.measure import marching_cubes
from torch import Tensor

from .graph_model import PartNode

MIN_LATENT = 5


@dataclass(frozen=True)
class ShapeParams:
    half_extents: Tensor  # (..., 3)
    corner_radius: Tensor  # (...)
    taper: Tensor  # (...)


def decode_shape(s) -> ShapeParams:
    s = torch.as_tensor(s, dtype=torch.float64) if not isinstance(s, Tensor) else s
    if s.shape[-1] < MIN_LATENT:
        raise ValueError(f"shape latent needs at least {MIN_LATENT} entries, got {s.shape[-1]}")
    return ShapeParams(
        half_extents=0.35 + 0.65 * torch.sigmoid(s[..., 0:3]),
        corner_radius=0.5 * torch.sigmoid(s[..., 3]),
        taper=0.5 * torch.tanh(s[..., 4]),
    )


def safe_norm(v: Tensor, dim: int = -1) -> Tensor:
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = (v * v).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def sdf_local(p: Tensor, params: ShapeParams) -> Tensor:
    """Signed distance in the unit frame; negative inside."""
    h = params.half_extents
    taper = params.taper
    z = p[..., 2]
    scale = 1.0 + taper * z.clamp(-1.0, 1.0)
    warped = torch.stack([p[..., 0] / scale, p[..., 1] / scale, z], dim=-1)
    radius = 2.0 * params.corner_radius * h.min(dim=-1).values
    q = warped.abs() - (h - radius.unsqueeze(-1))
    outside = safe_norm(q.clamp(min=0.0))
    inside = q.max(dim=-1).values.clamp(max=0.0)
    return (outside + inside - radius) * scale


def node_tensors(node: PartNode) -> tuple[Tensor, Tensor, Tensor]:
    return (
        torch.as_tensor(node.t, dtype=torch.float64),
        torch.as_tensor(node.b, dtype=torch.float64),
        torch.as_tensor(node.s, dtype=torch.float64),
    )


def sdf_box_params(p: Tensor, t: Tensor, b: Tensor, params: ShapeParams) -> Tensor:
    """World-frame SDF of a part with center ``t``, bbox ``b`` and decoded shape."""
    half = 0.5 * b
    q = p - t
    qc = torch.maximum(torch.minimum(q, half), -half)
    return safe_norm(q - qc) + sdf_local(qc / half, params) * half.min(dim=-1).values


def sdf_box_query(p: Tensor, t: Tensor, b: Tensor, s: Tensor) -> Tensor:
    return sdf_box_params(p, t, b, decode_shape(s))


def sdf_world(p, node: PartNode) -> Tensor:
    p = torch.as_tensor(p, dtype=torch.float64) if not isinstance(p, Tensor) else p
    t, b, s = node_tensors(node)
    return sdf_box_query(p, t, b, s)


def scene_sdf(p: Tensor, nodes: list[PartNode]) -> Tensor:
    """Union of existing parts (min over SDFs)."""
    vals = [sdf_world(p, n) for n in nodes if n.exists]
    if not vals:
        return torch.full(p.shape[:-1], float("inf"), dtype=torch.float64)
    return torch.stack(vals, dim=0).min(dim=0).values


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (T, 3) int

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        if self.empty:
            return 0.0
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "Mesh":
        return Mesh(self.vertices @ np.asarray(R).T + np.asarray(t), self.faces.copy())

    def to_obj(self) -> str:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        return "\n".join(lines) + "\n"


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    meshes = [m for m in meshes if not m.empty]
    if not meshes:
        return empty_mesh()
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def cell_diagonal(node: PartNode, resolution: int) -> float:
    span = 1.05 * np.asarray(node.b)
    return float(np.linalg.norm(span / (resolution - 1)))


def extract_mesh(node: PartNode, resolution: int = 32) -> Mesh:
    """Marching cubes over the 5%-inflated bbox, returned in the object frame.

    Existence is ignored.  An empty mesh signals a failed extraction (no sign
    change on the grid).
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    half = 0.5 * 1.05 * np.asarray(node.b, dtype=np.float64)
    axes = [np.linspace(-h, h, resolution) for h in half]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    t, b, s = node_tensors(node)
    with torch.no_grad():
        vals = sdf_box_query(torch.from_numpy(grid), torch.zeros(3, dtype=torch.float64), b, s).numpy()
    if vals.min() >= 0.0 or vals.max() <= 0.0:
        return empty_mesh()
    spacing = np.array([2 * h / (resolution - 1) for h in half])
    # a positive border closes surfaces of tapered shapes that leave the grid
    vals = np.pad(vals, 1, constant_values=max(float(vals.max()), float(spacing.max())))
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=tuple(spacing))
    verts = verts - half - spacing + np.asarray(node.t)
    return Mesh(verts.astype(np.float64), faces.astype(np.int64))
