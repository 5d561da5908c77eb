"""Quick self-checks runnable from the command line.

``oracle_sampling_check`` samples an analytic Gaussian with the reverse chain
and compares moments; ``gradient_check`` compares guidance gradients against
central finite differences.
"""

from __future__ import annotations

import numpy as np
import torch

from .diffusion import advance, init_chains, make_schedule
from .graph_model import Layout, encode, project
from .guidance import GuidanceConfig, combined_loss, draw_state_fractions, loss_gradient


def oracle_sampling_check(n: int = 2000, dim: int = 16, sigma: float = 0.5, seed: int = 0) -> dict:
    """Moments of unguided samples from an exact single-Gaussian denoiser."""
    from .denoiser import DenoiserSpec, OracleDenoiser

    schedule = make_schedule(1000)
    mu = np.linspace(-1.0, 1.0, dim)
    den = OracleDenoiser(DenoiserSpec("oracle_gaussian", means=[mu.tolist()], sigmas=[sigma]), schedule)
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]
    state = advance(init_chains(seeds, dim, schedule), den, schedule, GuidanceConfig())
    x = state.x.numpy()
    mean, var = x.mean(axis=0), x.var(axis=0, ddof=1)
    stderr = np.sqrt(var / n)
    z = np.abs(mean - mu) / stderr
    rel_var = np.abs(var / sigma**2 - 1.0)
    return {
        "max_z": float(z.max()),
        "max_rel_var": float(rel_var.max()),
        "passed": bool(z.max() < 4.0 and rel_var.max() < 0.15),
    }


class _FrozenEps:
    """Denoiser stand-in returning a fixed noise prediction."""

    supports_input_grad = False

    def __init__(self, eps: torch.Tensor):
        self.eps = eps

    def __call__(self, x_t, t, category=None):
        return self.eps.expand_as(x_t)


def perturbed_latent(rng: np.random.Generator, layout: Layout | None = None) -> np.ndarray:
    """A synthetic object with jittered, enlarged parts and noisy edges."""
    from .synthdata import CATEGORIES, generate_object

    layout = layout or Layout()
    g = generate_object(CATEGORIES[int(rng.integers(len(CATEGORIES)))], rng, layout.F)
    for n in g.nodes:
        n.t = n.t + rng.normal(0.0, 0.05, 3)
        n.b = n.b * rng.uniform(1.0, 1.4, 3)
        n.s = n.s + rng.normal(0.0, 0.5, layout.F)
    x = encode(g, layout.K, layout.F)
    nodes, edges = layout.split(torch.from_numpy(x))
    nodes[:, 0] += torch.from_numpy(rng.uniform(-0.3, 0.3, layout.K))
    # absent slots encode as identical zeros; spread them to a generic point
    nodes[:, 1:] += torch.from_numpy(rng.normal(0.0, 0.02, (layout.K, layout.node_dim - 1)))
    edges[:, 3:] += torch.from_numpy(rng.normal(0.0, 0.05, (layout.E, layout.edge_dim - 3)))
    edges[:, :3] += torch.from_numpy(rng.normal(0.0, 0.1, (layout.E, 3)))
    return layout.join(nodes, edges).numpy()


def finite_difference_gradient(fn, x: torch.Tensor, h: float = 1e-6, chunk: int = 256) -> torch.Tensor:
    """Coordinatewise central differences of a batched scalar function."""
    D = x.shape[0]
    eye = torch.eye(D, dtype=x.dtype) * h
    out = torch.empty(D, dtype=x.dtype)
    for s in range(0, D, chunk):
        e = eye[s : s + chunk]
        with torch.no_grad():
            out[s : s + chunk] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def gradient_check(term: str, x0: np.ndarray, t: int = 50, seed: int = 0, n_points: int = 64,
                   h: float = 1e-5) -> tuple[float, float, bool]:
    """Relative error of the posterior-only guidance gradient for one loss term.

    Returns ``(relative error, finite-difference gradient norm, smooth)``. A zero
    norm means the term is flat at this latent and the check is vacuous.
    ``smooth`` is False when differences at ``h`` and ``h / 10`` disagree, i.e.
    a kink of the loss (an overlap appearing or vanishing) lies inside the
    stencil and the finite difference is not a valid reference there.
    """
    layout = Layout()
    schedule = make_schedule(1000)
    rng = np.random.default_rng(seed)
    eps = torch.from_numpy(rng.standard_normal(layout.dim))
    x0_t = torch.from_numpy(x0)
    x_t = schedule.forward_sample(x0_t, t, eps)
    f = layout.unpack(project(x0_t[None], layout))
    P = None
    if term == "pc":
        # points scattered around the existing part centers
        centers = f["t"][0][f["o"][0] > 0].numpy()
        if len(centers) == 0:
            centers = np.zeros((1, 3))
        P = centers[rng.integers(len(centers), size=n_points)] + rng.normal(0.0, 0.2, (n_points, 3))
        P = torch.from_numpy(P)
    cfg = GuidanceConfig(**{f"w_{term}": 1.0})
    fractions = draw_state_fractions(rng, 1, layout)
    den = _FrozenEps(eps)
    g = loss_gradient(x_t, t, den, schedule, P, cfg, layout=layout, eps=eps, fractions=fractions)

    def fn(xs: torch.Tensor) -> torch.Tensor:
        x0_hat = project(schedule.estimate_x0(xs, t, eps), layout)
        n = xs.shape[0]
        Pb = None if P is None else P.expand(n, -1, -1)
        return combined_loss(x0_hat, Pb, cfg, layout=layout, fractions=fractions.expand(n, -1, -1, -1))

    fd = finite_difference_gradient(fn, x_t, h)
    fine = finite_difference_gradient(fn, x_t, h / 10)
    norm = float(torch.linalg.vector_norm(fd))
    scale = max(norm, 1e-12)
    smooth = float(torch.linalg.vector_norm(fd - fine)) / scale < 1e-4
    return float(torch.linalg.vector_norm(g - fd)) / scale, norm, smooth


def run_selftest(seed: int = 0, n_latents: int = 3) -> bool:
    ok = True
    res = oracle_sampling_check(seed=seed)
    print(f"{'PASS' if res['passed'] else 'FAIL'}  oracle sampler  max|z|={res['max_z']:.2f}  "
          f"max rel var err={res['max_rel_var']:.3f}")
    ok &= res["passed"]
    rng = np.random.default_rng(seed)
    for term in ("pc", "pen", "mob"):
        errs, k = [], 0
        while len(errs) < n_latents and k < 20 * n_latents:
            err, norm, smooth = gradient_check(term, perturbed_latent(rng), seed=seed + k)
            k += 1
            if norm > 0 and smooth:
                errs.append(err)
        good = len(errs) == n_latents and max(errs) < 1e-4
        worst = max(errs) if errs else float("nan")
        print(f"{'PASS' if good else 'FAIL'}  {term} gradient  max rel err={worst:.2e} over {len(errs)} latents")
        ok &= good
    return bool(ok)
