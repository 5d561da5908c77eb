"""Guidance losses on posterior-mean latents and their gradients.

Losses take projected latents of shape ``(B, D)`` (or ``(D,)``) and return one
value per latent.  Penetration and mobility use a midpoint grid over the
intersection of two boxes; grids of different sizes are flattened into one
point list with a box index so a whole batch runs as a handful of tensor ops.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .graph_model import MIN_BBOX, Layout, project
from .kinematics import child_to_parent
from .shape_sdf import ShapeParams, decode_shape, sdf_box_params

BASE_WEIGHTS = {"pc": 45.0, "pen": 2.0, "mob": 2.0}
VOLUME_SCALE = 1e5
EDGE_THRESHOLD = 0.1
MOBILITY_STATES = 2
EXISTENCE_CLAMP = 1.5
GRAD_MODES = ("posterior_only", "full_chain")


class ConfigError(ValueError):
    pass


class CapabilityError(RuntimeError):
    pass


@dataclass
class GuidanceConfig:
    w_pc: float = 0.0
    w_pen: float = 0.0
    w_mob: float = 0.0
    n_g: int = 500
    tau: float = 1000.0
    eps_stab: float = 1e-6
    n_star: int = 1000
    grad_mode: str = "posterior_only"
    # guidance displacement per step is capped at step_clip * sigma_t; None disables
    step_clip: float | None = 1.0

    @classmethod
    def for_terms(cls, terms: Sequence[str], **overrides) -> "GuidanceConfig":
        """Base weights divided by the number of active terms."""
        terms = [t for t in terms if t]
        unknown = set(terms) - set(BASE_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown guidance terms {sorted(unknown)}")
        weights = {f"w_{k}": (BASE_WEIGHTS[k] / len(terms) if k in terms else 0.0) for k in BASE_WEIGHTS}
        weights.update(overrides)
        return cls(**weights)

    @property
    def active(self) -> bool:
        return self.w_pc > 0 or self.w_pen > 0 or self.w_mob > 0

    def validate(self, T: int | None = None) -> "GuidanceConfig":
        if min(self.w_pc, self.w_pen, self.w_mob) < 0:
            raise ConfigError("guidance weights must be nonnegative")
        if self.n_g < 0 or (T is not None and self.n_g > T):
            raise ConfigError(f"n_g={self.n_g} outside [0, T]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.n_star < 1:
            raise ConfigError("n_star must be at least 1")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigError(f"grad_mode must be one of {GRAD_MODES}")
        if self.step_clip is not None and self.step_clip <= 0:
            raise ConfigError("step_clip must be positive or None")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def read_config_file(path) -> dict[str, str]:
    """Parse a ``key = value`` text file (``#`` comments, no sections)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    with open(path) as fh:
        parser.read_string("[root]\n" + fh.read())
    return dict(parser["root"])


def config_from_mapping(values: dict, base: GuidanceConfig | None = None) -> GuidanceConfig:
    cfg = asdict(base or GuidanceConfig())
    types = {f.name: f.type for f in fields(GuidanceConfig)}
    for key, raw in values.items():
        if key not in types:
            continue
        if raw is None:
            continue
        if key == "step_clip" and str(raw).lower() in ("none", "off", ""):
            cfg[key] = None
        elif key == "grad_mode":
            cfg[key] = str(raw)
        elif key in ("n_g", "n_star"):
            cfg[key] = int(raw)
        else:
            cfg[key] = float(raw)
    return GuidanceConfig(**cfg)


# --------------------------------------------------------------------------
# point cloud alignment
# --------------------------------------------------------------------------


def soft_correspondence(distances, existences, tau: float = 1000.0, eps_stab: float = 1e-6) -> Tensor:
    """Softmax over parts of ``-tau d^2 / (o + eps)``; ``distances (..., n_p, K)``."""
    d = torch.as_tensor(distances, dtype=torch.float64)
    o = torch.as_tensor(existences, dtype=torch.float64)
    o = o.clamp(min=-0.5 * eps_stab)
    logits = -tau * d * d / (o.unsqueeze(-2) + eps_stab)
    return torch.softmax(logits, dim=-1)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, Tensor) else x
    return (x.unsqueeze(0), True) if x.ndim == 1 else (x, False)


def _points(P, batch: int) -> Tensor:
    pts = getattr(P, "points", P)
    if isinstance(pts, (list, tuple)):
        pts = torch.stack([torch.as_tensor(getattr(p, "points", p), dtype=torch.float64) for p in pts])
    pts = torch.as_tensor(pts, dtype=torch.float64)
    if pts.ndim == 2:
        pts = pts.unsqueeze(0).expand(batch, -1, -1)
    if pts.shape[1] == 0:
        raise ValueError("point cloud is empty")
    return pts


def part_distances(x0: Tensor, points: Tensor, layout: Layout) -> Tensor:
    """SDF of every point to every node slot: ``(B, M, K)``."""
    f = layout.unpack(x0)
    params = decode_shape(f["s"].unsqueeze(1))
    b = f["b"].clamp(min=MIN_BBOX)
    return sdf_box_params(points.unsqueeze(2), f["t"].unsqueeze(1), b.unsqueeze(1), params)


def loss_pointcloud(x0, P, cfg: GuidanceConfig, layout: Layout | None = None) -> Tensor:
    """Soft-assigned squared SDF residuals summed over points and parts."""
    layout = layout or Layout()
    x0, single = _batched(x0)
    pts = _points(P, x0.shape[0])
    d = part_distances(x0, pts, layout)
    alpha = soft_correspondence(d, layout.unpack(x0)["o"], cfg.tau, cfg.eps_stab)
    loss = (alpha * d * d).sum(dim=(-1, -2))
    return loss[0] if single else loss


# --------------------------------------------------------------------------
# grid quadrature over box intersections
# --------------------------------------------------------------------------


def grid_counts(b_inter, n_star: int = 1000) -> np.ndarray:
    """Points per axis for a roughly isotropic grid of about ``n_star`` points."""
    b = np.asarray(b_inter, dtype=np.float64)
    if np.any(b < 0):
        raise ValueError("intersection extents must be nonnegative")
    lead = b.shape[:-1]
    out = np.zeros(b.shape, dtype=np.int64)
    ok = np.all(b > 0, axis=-1)
    if np.any(ok):
        bo = b[ok]
        l_v = np.cbrt(np.prod(bo, axis=-1, keepdims=True))
        raw = np.maximum(np.cbrt(float(n_star)) * bo / l_v, 1.0)
        # guard against cbrt round-off putting exact integers just below
        out[ok] = np.floor(raw * (1.0 + 1e-12)).astype(np.int64)
    return out.reshape(*lead, 3)


def penetration_value(d_i: Tensor, d_j: Tensor) -> Tensor:
    s = (d_i + d_j).clamp(max=0.0)
    return 0.5 * s * s


def penetration_error(q, node_i, node_j) -> Tensor:
    from .shape_sdf import sdf_world

    return penetration_value(sdf_world(q, node_i), sdf_world(q, node_j))


@dataclass
class BoxGrid:
    points: Tensor  # (N, 3)
    box: Tensor  # (N,) long index into the boxes
    volume_element: Tensor  # (P,) scaled volume per grid cell


def box_grid(lo: Tensor, hi: Tensor, n_star: int) -> BoxGrid:
    """Cell-centre grids inside boxes ``[lo, hi]`` of shape ``(P, 3)``.

    Boxes must be nonempty.  Points stay differentiable in ``lo`` and ``hi``.
    """
    ext = hi - lo
    counts = grid_counts(ext.detach().cpu().numpy().reshape(-1, 3), n_star)
    sizes = counts.prod(axis=1)
    box = np.repeat(np.arange(len(sizes)), sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    r = np.arange(sizes.sum()) - offsets[box]
    c = counts[box]
    idx = np.stack([r // (c[:, 1] * c[:, 2]), (r // c[:, 2]) % c[:, 1], r % c[:, 2]], axis=1)
    frac = torch.from_numpy((idx + 0.5) / c).to(lo.dtype)
    box_t = torch.from_numpy(box)
    points = lo[box_t] + frac * ext[box_t]
    counts_t = torch.from_numpy(counts).to(lo.dtype)
    vel = VOLUME_SCALE * (ext / counts_t).prod(dim=-1)
    return BoxGrid(points, box_t, vel)


def _gather_params(params: ShapeParams, index) -> ShapeParams:
    return ShapeParams(params.half_extents[index], params.corner_radius[index], params.taper[index])


def _grid_sum(grid: BoxGrid, psi: Tensor, n_boxes: int) -> Tensor:
    per_box = torch.zeros(n_boxes, dtype=psi.dtype).index_add(0, grid.box, psi)
    return per_box * grid.volume_element


def pair_penetration(
    x0: Tensor,
    layout: Layout,
    n_star: int,
    pair_weight: Callable[[Tensor, Tensor], Tensor],
) -> Tensor:
    """Sum over ordered part pairs of ``V_el * sum(psi) * weight``; ``(B,)``."""
    f = layout.unpack(x0)
    B = x0.shape[0]
    pairs = torch.from_numpy(layout.pair_array)
    if layout.E == 0:
        return x0.new_zeros(B)
    i, j = pairs[:, 0], pairs[:, 1]
    t, b = f["t"], f["b"]
    lo = torch.maximum(t[:, i] - 0.5 * b[:, i], t[:, j] - 0.5 * b[:, j])
    hi = torch.minimum(t[:, i] + 0.5 * b[:, i], t[:, j] + 0.5 * b[:, j])
    w = pair_weight(f["o"][:, i], f["o"][:, j])  # (B, E)
    active = ((hi - lo).detach() > 0).all(-1) & (w.detach() > 0)
    total = x0.new_zeros(B)
    if not bool(active.any()):
        return total
    bi, ei = torch.nonzero(active, as_tuple=True)
    grid = box_grid(lo[bi, ei], hi[bi, ei], n_star)
    params = decode_shape(f["s"])
    pb, pe = bi[grid.box], ei[grid.box]
    pi, pj = i[pe], j[pe]
    d_i = sdf_box_params(grid.points, t[pb, pi], b[pb, pi], _gather_params(params, (pb, pi)))
    d_j = sdf_box_params(grid.points, t[pb, pj], b[pb, pj], _gather_params(params, (pb, pj)))
    per_box = _grid_sum(grid, penetration_value(d_i, d_j), len(bi)) * w[bi, ei]
    # the ordered pairs (i, j) and (j, i) contribute identical terms
    return total.index_add(0, bi, 2.0 * per_box)


def loss_penetration(x0, cfg: GuidanceConfig, layout: Layout | None = None) -> Tensor:
    layout = layout or Layout()
    x0, single = _batched(x0)
    loss = pair_penetration(
        x0, layout, cfg.n_star, lambda oi, oj: (oi * oj).clamp(0.0, EXISTENCE_CLAMP)
    )
    return loss[0] if single else loss


# --------------------------------------------------------------------------
# mobility
# --------------------------------------------------------------------------

_CORNERS = torch.tensor(
    [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)],
    dtype=torch.float64,
)


def draw_state_fractions(rng, batch: int, layout: Layout, n_states: int = MOBILITY_STATES) -> Tensor:
    """Uniform fractions ``(B, E, S, 2)`` placing states inside the joint limits.

    ``rng`` is one generator (shared by the batch) or a sequence with one
    generator per latent.
    """
    if isinstance(rng, np.random.Generator) or rng is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.uniform(size=(batch, layout.E, n_states, 2))
    else:
        rngs = list(rng)
        if len(rngs) != batch:
            raise ValueError("need one generator per latent")
        u = np.stack([g.uniform(size=(layout.E, n_states, 2)) for g in rngs])
    return torch.from_numpy(u)


def edge_penetration(
    x0: Tensor,
    layout: Layout,
    n_star: int,
    fractions: Tensor,
    edge_mask: Tensor,
    edge_weight: Tensor,
    parent_is_first: Tensor,
) -> Tensor:
    """Per-latent sum over (edge, state) of weighted grid penetration.

    ``fractions (B, E, S, 2)`` place ``(gamma, d)`` between the ordered limits.
    Returns ``(B,)`` summed over edges and states (no state averaging).
    """
    f = layout.unpack(x0)
    B = x0.shape[0]
    total = x0.new_zeros(B)
    mask = edge_mask.detach()
    if not bool(mask.any()):
        return total
    bi, ei = torch.nonzero(mask, as_tuple=True)
    pairs = torch.from_numpy(layout.pair_array)
    first, second = pairs[ei, 0], pairs[ei, 1]
    pf = parent_is_first[bi, ei]
    par = torch.where(pf, first, second)
    chi = torch.where(pf, second, first)

    S = fractions.shape[2]
    rho = f["rho"][bi, ei]  # (A, 2, 2)
    frac = fractions[bi, ei].to(x0.dtype)  # (A, S, 2)
    lo_lim, hi_lim = rho[..., 0], rho[..., 1]  # (A, 2)
    states = lo_lim.unsqueeze(1) + frac * (hi_lim - lo_lim).unsqueeze(1)  # (A, S, 2)

    A = len(bi)
    rep = lambda v: v.unsqueeze(1).expand(A, S, *v.shape[1:]).reshape(A * S, *v.shape[1:])
    l, m = rep(f["l"][bi, ei]), rep(f["m"][bi, ei])
    t_p, t_c = rep(f["t"][bi, par]), rep(f["t"][bi, chi])
    b_p, b_c = rep(f["b"][bi, par]), rep(f["b"][bi, chi])
    gamma, dist = states[..., 0].reshape(-1), states[..., 1].reshape(-1)
    R, trans = child_to_parent(l, m, gamma, dist, t_p, t_c)

    corners = _CORNERS.to(x0.dtype) * b_c.unsqueeze(1)  # (A*S, 8, 3)
    moved = (R.unsqueeze(1) @ corners.unsqueeze(-1)).squeeze(-1) + trans.unsqueeze(1)
    lo = torch.maximum(moved.min(dim=1).values, -0.5 * b_p)
    hi = torch.minimum(moved.max(dim=1).values, 0.5 * b_p)
    nonempty = ((hi - lo).detach() > 0).all(-1)
    if not bool(nonempty.any()):
        return total
    keep = torch.nonzero(nonempty, as_tuple=True)[0]
    grid = box_grid(lo[keep], hi[keep], n_star)
    row = keep[grid.box]  # index into A*S

    params = decode_shape(f["s"])
    edge_of_row = torch.arange(A).repeat_interleave(S)
    pb = bi[edge_of_row]
    p_par, p_chi = par[edge_of_row], chi[edge_of_row]
    zero = torch.zeros(3, dtype=x0.dtype)
    d_par = sdf_box_params(grid.points, zero, b_p[row], _gather_params(params, (pb[row], p_par[row])))
    local = (R[row].transpose(-1, -2) @ (grid.points - trans[row]).unsqueeze(-1)).squeeze(-1)
    d_chi = sdf_box_params(local, zero, b_c[row], _gather_params(params, (pb[row], p_chi[row])))
    per_box = _grid_sum(grid, penetration_value(d_par, d_chi), len(keep))
    weight = edge_weight[bi, ei][edge_of_row[keep]]
    return total.index_add(0, pb[keep], per_box * weight)


def mobility_edges(x0: Tensor, layout: Layout) -> tuple[Tensor, Tensor, Tensor]:
    """Edge scores, activity mask (score > 0.1) and direction flags."""
    c = layout.unpack(x0)["c"]
    score = torch.maximum(c[..., 0], c[..., 2])
    parent_is_first = ~(c[..., 0] > c[..., 2]).detach()
    return score, score.detach() > EDGE_THRESHOLD, parent_is_first


def loss_mobility(x0, cfg: GuidanceConfig, rng=None, layout: Layout | None = None, fractions: Tensor | None = None) -> Tensor:
    """Edge-weighted penetration at two random articulation states, doubled."""
    layout = layout or Layout()
    x0, single = _batched(x0)
    if fractions is None:
        fractions = draw_state_fractions(rng, x0.shape[0], layout)
    score, mask, parent_is_first = mobility_edges(x0, layout)
    total = edge_penetration(x0, layout, cfg.n_star, fractions, mask, score, parent_is_first)
    loss = 2.0 * total / fractions.shape[2]
    return loss[0] if single else loss


# --------------------------------------------------------------------------
# combination and gradient
# --------------------------------------------------------------------------


def combined_loss(x0, P, cfg: GuidanceConfig, rng=None, layout: Layout | None = None, fractions: Tensor | None = None) -> Tensor:
    layout = layout or Layout()
    x0, single = _batched(x0)
    total = x0.new_zeros(x0.shape[0])
    if cfg.w_pc > 0:
        if P is None:
            raise ConfigError("point cloud guidance needs a point cloud")
        total = total + cfg.w_pc * loss_pointcloud(x0, P, cfg, layout)
    if cfg.w_pen > 0:
        total = total + cfg.w_pen * loss_penetration(x0, cfg, layout)
    if cfg.w_mob > 0:
        total = total + cfg.w_mob * loss_mobility(x0, cfg, rng, layout, fractions)
    return total[0] if single else total


def loss_gradient(
    x_t,
    t,
    denoiser,
    schedule,
    P,
    cfg: GuidanceConfig,
    rng=None,
    category=None,
    layout: Layout | None = None,
    eps: Tensor | None = None,
    fractions: Tensor | None = None,
) -> Tensor:
    """Gradient of the combined loss at ``project(x0_hat(x_t))`` w.r.t. ``x_t``.

    ``posterior_only`` freezes the noise prediction (``eps`` may be passed in
    to reuse the sampler's prediction); ``full_chain`` differentiates through
    the denoiser.
    """

    layout = layout or Layout()
    x_t, single = _batched(x_t)
    x_t = x_t.detach().to(torch.float64)
    if fractions is None and cfg.w_mob > 0:
        fractions = draw_state_fractions(rng, x_t.shape[0], layout)
    tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    with torch.enable_grad():
        x_var = x_t.clone().requires_grad_(True)
        if cfg.grad_mode == "full_chain":
            if not getattr(denoiser, "supports_input_grad", False):
                raise CapabilityError("denoiser cannot differentiate w.r.t. its input")
            eps_hat = denoiser(x_var, tt, category).to(torch.float64)
        else:
            if eps is None:
                with torch.no_grad():
                    eps = denoiser(x_t, tt, category)
            eps_hat = eps.detach().to(torch.float64).reshape(x_t.shape)
        x0 = project(schedule.estimate_x0(x_var, t, eps_hat), layout)
        loss = combined_loss(x0, P, cfg, rng, layout, fractions).sum()
        if not loss.requires_grad:
            grad = torch.zeros_like(x_t)
        else:
            (grad,) = torch.autograd.grad(loss, x_var)
    return grad[0] if single else grad
