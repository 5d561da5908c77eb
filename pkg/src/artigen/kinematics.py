"""Screw motions about Plücker lines and relative part poses.

Transforms are ``(R, t)`` pairs acting as ``x -> R @ x + t``.  All functions
are torch ops with leading batch dimensions so they can sit inside the
guidance losses.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
import torch
from torch import Tensor

from .graph_model import JointEdge, PartNode

UNIT_TOL = 1e-6


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def rodrigues(axis: Tensor, angle: Tensor) -> Tensor:
    """Rotation matrices for unit ``axis (...,3)`` and ``angle (...)``."""
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=axis.dtype, device=axis.device).expand(K.shape)
    s = torch.sin(angle)[..., None, None]
    c = torch.cos(angle)[..., None, None]
    return eye + s * K + (1.0 - c) * (K @ K)


def screw(l: Tensor, m: Tensor, gamma: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
    """Screw transform without precondition checks (batched, differentiable)."""
    R = rodrigues(l, gamma)
    p0 = torch.linalg.cross(l, m)
    t = p0 - (R @ p0.unsqueeze(-1)).squeeze(-1) + d.unsqueeze(-1) * l
    return R, t


def screw_transform(l, m, gamma, d) -> tuple[Tensor, Tensor]:
    """Rotate by ``gamma`` about and slide by ``d`` along the line ``(l, m)``."""
    l, m, gamma, d = _t(l), _t(m), _t(gamma), _t(d)
    if torch.any((torch.linalg.vector_norm(l, dim=-1) - 1.0).abs() > UNIT_TOL):
        raise ValueError("Plücker direction must be a unit vector")
    if torch.any(((l * m).sum(-1)).abs() > UNIT_TOL):
        raise ValueError("Plücker moment must be orthogonal to the direction")
    return screw(l, m, gamma, d)


def compose(a: tuple[Tensor, Tensor], b: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """``a ∘ b``: apply ``b`` first."""
    Ra, ta = a
    Rb, tb = b
    return Ra @ Rb, (Ra @ tb.unsqueeze(-1)).squeeze(-1) + ta


def invert(a: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    R, t = a
    Rt = R.transpose(-1, -2)
    return Rt, -(Rt @ t.unsqueeze(-1)).squeeze(-1)


def apply(a: tuple[Tensor, Tensor], x: Tensor) -> Tensor:
    R, t = a
    return (R @ x.unsqueeze(-1)).squeeze(-1) + t


def child_to_parent(l, m, gamma, d, t_parent, t_child) -> tuple[Tensor, Tensor]:
    """Screw ∘ T_parent⁻¹ ∘ T_child with pure-translation part poses."""
    R, ts = screw(l, m, gamma, d)
    offset = t_child - t_parent
    return R, (R @ offset.unsqueeze(-1)).squeeze(-1) + ts


def relative_pose(edge: JointEdge, node_i: PartNode, node_j: PartNode, gamma, d) -> tuple[Tensor, Tensor]:
    """Pose of part ``j``'s local frame expressed in part ``i``'s frame."""
    l, m = _t(edge.l), _t(edge.m)
    screw_transform(l, m, 0.0, 0.0)  # precondition check
    return child_to_parent(l, m, _t(gamma), _t(d), _t(node_i.t), _t(node_j.t))


def sample_states(
    edge: JointEdge,
    n: int,
    mode: Literal["uniform_random", "equally_spaced"] = "uniform_random",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Return ``(n, 2)`` articulation states ``(gamma, d)`` inside the limits."""
    if n < 1:
        raise ValueError("need at least one state")
    lo = np.minimum(edge.limits[:, 0], edge.limits[:, 1])
    hi = np.maximum(edge.limits[:, 0], edge.limits[:, 1])
    if mode == "equally_spaced":
        frac = np.linspace(0.0, 1.0, n)[:, None] if n > 1 else np.zeros((1, 1))
    elif mode == "uniform_random":
        rng = rng if rng is not None else np.random.default_rng()
        frac = rng.uniform(size=(n, 2))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return lo + frac * (hi - lo)
