"""DDPM schedule, closed-form steps and (guided) reverse sampling.

Time indices are 1-based: ``x_t`` for ``t = 1..T`` with ``x_0`` the clean
sample.  Chains are seeded individually so a latent does not depend on which
other chains share its batch.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .graph_model import Layout, project
from .guidance import ConfigError, GuidanceConfig, draw_state_fractions, loss_gradient

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index t, entry 0 unused (beta_0 = 0)
    alphas: np.ndarray
    alpha_bars: np.ndarray  # alpha_bars[0] = 1
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def forward_sample(self, x0: Tensor, t: int, eps: Tensor) -> Tensor:
        return forward_sample(x0, eps, float(self.alpha_bars[t]))

    def estimate_x0(self, x_t: Tensor, t: int, eps: Tensor) -> Tensor:
        return estimate_x0(x_t, eps, float(self.alpha_bars[t]))

    def reverse_step(self, x_t: Tensor, t: int, eps: Tensor, z: Tensor) -> Tensor:
        sigma = 0.0 if t == 1 else float(self.sigmas[t])
        return reverse_step(x_t, eps, z, float(self.alphas[t]), float(self.alpha_bars[t]), sigma)


def make_schedule(T: int = 1000) -> NoiseSchedule:
    """Linear betas from 1e-4 to 2e-2 with ``sigma_t^2 = beta_t``."""
    if T < 2:
        raise ValueError("need at least two diffusion steps")
    betas = np.concatenate([[0.0], np.linspace(BETA_START, BETA_END, T)])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas), np.sqrt(betas))


def forward_sample(x0: Tensor, eps: Tensor, alpha_bar: float) -> Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match {tuple(x0.shape)}")
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def estimate_x0(x_t: Tensor, eps: Tensor, alpha_bar: float) -> Tensor:
    if alpha_bar <= 0:
        raise ValueError("alpha_bar must be positive")
    return (x_t - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar)


def reverse_step(x_t: Tensor, eps: Tensor, z: Tensor, alpha: float, alpha_bar: float, sigma: float) -> Tensor:
    coef = (1.0 - alpha) / np.sqrt(1.0 - alpha_bar)
    return (x_t - coef * eps) / np.sqrt(alpha) + sigma * z


# --------------------------------------------------------------------------
# chains
# --------------------------------------------------------------------------


@dataclass
class ChainState:
    """A batch of reverse chains currently at time ``t`` (``x`` is ``x_t``)."""

    x: Tensor
    t: int
    seeds: list[int]
    rngs: list[np.random.Generator] = field(repr=False)

    def copy(self) -> "ChainState":
        return ChainState(self.x.clone(), self.t, list(self.seeds), copy.deepcopy(self.rngs))


def init_chains(seeds: Sequence[int], dim: int, schedule: NoiseSchedule) -> ChainState:
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    x = torch.from_numpy(np.stack([g.standard_normal(dim) for g in rngs]))
    return ChainState(x, schedule.T, [int(s) for s in seeds], rngs)


def _categories(category, batch: int):
    if category is None or isinstance(category, (int, np.integer)):
        return category
    cats = list(category)
    if len(cats) != batch:
        raise ValueError("need one category per chain")
    return cats


def _clip(g: Tensor, limit: float) -> Tensor:
    norm = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    scale = torch.where(norm > limit, limit / norm.clamp(min=1e-300), torch.ones_like(norm))
    return g * scale


def advance(
    state: ChainState,
    denoiser,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    until: int = 0,
    P=None,
    category=None,
    layout: Layout | None = None,
) -> ChainState:
    """Run reverse steps in place until ``state.t == until``."""
    layout = layout or Layout()
    B = state.x.shape[0]
    cats = _categories(category, B)
    guided = cfg.active
    if guided and cfg.w_pc > 0 and P is None:
        raise ConfigError("point cloud weight is positive but no point cloud was given")
    while state.t > until:
        t = state.t
        tt = torch.full((B,), t, dtype=torch.long)
        with torch.no_grad():
            eps = denoiser(state.x, tt, cats).to(torch.float64)
        if t > 1:
            z = torch.from_numpy(np.stack([g.standard_normal(state.x.shape[1]) for g in state.rngs]))
        else:
            z = torch.zeros_like(state.x)
        x_prev = schedule.reverse_step(state.x, t, eps, z)
        if guided and t <= cfg.n_g:
            fractions = None
            if cfg.w_mob > 0:
                step_rngs = [np.random.default_rng([s, t]) for s in state.seeds]
                fractions = draw_state_fractions(step_rngs, B, layout)
            g = loss_gradient(
                state.x, t, denoiser, schedule, P, cfg,
                category=cats, layout=layout,
                eps=eps if cfg.grad_mode == "posterior_only" else None,
                fractions=fractions,
            )
            if cfg.step_clip is not None:
                g = _clip(g, cfg.step_clip * float(schedule.sigmas[t]))
            x_prev = x_prev - g
        state.x = x_prev.detach()
        state.t = t - 1
    return state


def sample_batch(
    denoiser,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    seeds: Sequence[int],
    P=None,
    category=None,
    layout: Layout | None = None,
) -> Tensor:
    """Guided reverse diffusion for one chain per seed; returns projected ``x_0``."""
    layout = layout or Layout()
    cfg.validate(schedule.T)
    state = init_chains(seeds, layout.dim, schedule)
    advance(state, denoiser, schedule, cfg, 0, P, category, layout)
    return project(state.x, layout)


def sample(denoiser, schedule: NoiseSchedule, cfg: GuidanceConfig, P=None, category=None, seed: int = 0, layout: Layout | None = None) -> Tensor:
    pts = None if P is None else getattr(P, "points", P)
    return sample_batch(denoiser, schedule, cfg, [seed], None if pts is None else [pts], category, layout)[0]


# --------------------------------------------------------------------------
# raw latent dumps: u32 length, then little-endian float32 values
# --------------------------------------------------------------------------


def write_latent(path, x) -> None:
    arr = np.asarray(x.detach().cpu().numpy() if isinstance(x, Tensor) else x, dtype="<f4").reshape(-1)
    Path(path).write_bytes(struct.pack("<I", arr.size) + arr.tobytes())


def read_latent(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    arr = np.frombuffer(raw[4:], dtype="<f4")
    if arr.size != n:
        raise ValueError(f"latent dump declares {n} values but holds {arr.size}")
    return arr.astype(np.float64)
