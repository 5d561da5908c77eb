import math

import numpy as np
import pytest
import torch

from artigen import guidance
from artigen.denoiser import DenoiserSpec, OracleDenoiser
from artigen.diffusion import make_schedule
from artigen.graph_model import Layout, PartNode, project
from artigen.guidance import (
    CapabilityError,
    ConfigError,
    GuidanceConfig,
    combined_loss,
    config_from_mapping,
    grid_counts,
    loss_gradient,
    loss_mobility,
    loss_penetration,
    loss_pointcloud,
    penetration_value,
    read_config_file,
    soft_correspondence,
)
from artigen.kinematics import child_to_parent
from artigen.selftest import finite_difference_gradient
from artigen.shape_sdf import sdf_world

L = Layout()
BOXY = np.array([3.0, 3.0, 3.0, -3.0, 0, 0, 0, 0])


def latent(parts, edges=None, layout=L):
    """Build a latent from ``[(o, t, b, s)]`` and ``{(i, j): (c, l, m, limits)}``."""
    x = np.zeros(layout.dim)
    nodes = x[: layout.node_size].reshape(layout.K, layout.node_dim)
    # absent slots sit at zero existence so they carry no pair weight
    nodes[:, 4:7] = 1e-3
    for k, (o, t, b, s) in enumerate(parts):
        nodes[k] = np.concatenate([[o], t, b, s])
    e = x[layout.node_size :].reshape(layout.E, layout.edge_dim)
    e[:, 1] = 1.0
    e[:, 5] = 1.0
    for (i, j), (c, l, m, lim) in (edges or {}).items():
        e[layout.pair_index[(i, j)]] = np.concatenate([c, l, m, np.asarray(lim, float).reshape(4)])
    return torch.from_numpy(x)


def part(o=1.0, t=(0, 0, 0), b=(1, 1, 1), s=BOXY):
    return (o, np.asarray(t, float), np.asarray(b, float), np.asarray(s, float))


def as_node(p):
    o, t, b, s = p
    return PartNode(o > 0.5, t, b, s)


# ---------------------------------------------------------------- correspondences


def test_soft_correspondence_examples():
    a = soft_correspondence([[0.3, 0.3]], [1.0, 1.0])
    torch.testing.assert_close(a, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    a = soft_correspondence([[0.01, 0.02]], [1.0, 1.0], tau=1000, eps_stab=1e-6)
    assert float(a[0, 0]) == pytest.approx(math.exp(-0.1) / (math.exp(-0.1) + math.exp(-0.4)), abs=1e-6)
    assert float(a[0, 0]) == pytest.approx(0.5744, abs=1e-4)
    assert float(soft_correspondence([[0.7]], [0.2])[0, 0]) == 1.0


def test_soft_correspondence_rows_and_clamp():
    rng = np.random.default_rng(0)
    d = rng.uniform(0, 0.5, (200, 8))
    o = np.array([1.0, 0.6, -1.0, -1e-7, 0.0, -3.0, 1.2, 0.01])
    a = soft_correspondence(d, o)
    assert torch.isfinite(a).all()
    torch.testing.assert_close(a.sum(-1), torch.ones(200, dtype=torch.float64), rtol=0, atol=1e-9)


def test_doubling_tau_never_raises_entropy():
    rng = np.random.default_rng(1)
    d, o = rng.uniform(0, 0.2, (300, 5)), rng.uniform(0.2, 1, 5)

    def entropy(a):
        return -(a * torch.log(a.clamp(min=1e-300))).sum(-1)

    e1 = entropy(soft_correspondence(d, o, tau=100))
    e2 = entropy(soft_correspondence(d, o, tau=200))
    assert torch.all(e2 <= e1 + 1e-12)


# ---------------------------------------------------------------- point cloud loss


def single_part_latent():
    return latent([part(t=(0.2, 0.1, -0.1), b=(0.8, 0.6, 0.5))])


def test_loss_pointcloud_zero_on_surface():
    x = single_part_latent()
    n = as_node(part(t=(0.2, 0.1, -0.1), b=(0.8, 0.6, 0.5)))
    # surface points along rays from the centre, found by bisection
    dirs = np.random.default_rng(0).normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lo, hi = np.zeros(50), np.ones(50)
    for _ in range(80):
        mid = (lo + hi) / 2
        inside = sdf_world(n.t + mid[:, None] * dirs, n).numpy() < 0
        lo, hi = np.where(inside, mid, lo), np.where(inside, hi, mid)
    pts = n.t + lo[:, None] * dirs
    assert float(loss_pointcloud(x, pts, GuidanceConfig())) < 1e-9


def test_loss_pointcloud_single_point_closed_form():
    x = latent([part(b=(1, 1, 1), s=np.array([40, 40, 40, -40, 0, 0, 0, 0.0]))])
    # near-exact unit cube: a point 0.1 beyond the +x face
    val = loss_pointcloud(x, np.array([[0.6, 0.0, 0.0]]), GuidanceConfig())
    assert float(val) == pytest.approx(0.01, rel=1e-6)


def test_loss_pointcloud_monotone_under_scaling_and_translation_invariant():
    x = single_part_latent()
    pts = np.random.default_rng(2).normal(0, 0.3, (100, 3)) + [0.2, 0.1, -0.1]
    vals = [float(loss_pointcloud(x, (pts - [0.2, 0.1, -0.1]) * k + [0.2, 0.1, -0.1], GuidanceConfig()))
            for k in (1.5, 2.0, 3.0)]
    assert vals[0] < vals[1] < vals[2]
    shift = np.array([0.3, -0.7, 0.25])
    moved = latent([part(t=np.array([0.2, 0.1, -0.1]) + shift, b=(0.8, 0.6, 0.5))])
    a = loss_pointcloud(x, pts, GuidanceConfig())
    b = loss_pointcloud(moved, pts + shift, GuidanceConfig())
    assert abs(float(a - b)) < 1e-9


def test_loss_pointcloud_rejects_empty_cloud():
    with pytest.raises(ValueError):
        loss_pointcloud(single_part_latent(), np.zeros((0, 3)), GuidanceConfig())
    with pytest.raises(ValueError):
        grid_counts([1, -1, 1])


def test_loss_pointcloud_has_existence_gradient():
    x = latent([part(o=0.8, t=(-0.3, 0, 0), b=(0.5, 0.5, 0.5)), part(o=0.7, t=(0.4, 0, 0), b=(0.5, 0.5, 0.5))])
    x = x.clone().requires_grad_(True)
    pts = np.random.default_rng(3).normal(0, 0.4, (64, 3))
    loss_pointcloud(x, pts, GuidanceConfig()).backward()
    assert float(x.grad[0].abs()) > 0 and float(x.grad[L.node_dim].abs()) > 0


# ---------------------------------------------------------------- grid and psi


def test_grid_counts_examples():
    assert grid_counts([2, 2, 2], 1000).tolist() == [10, 10, 10]
    c = grid_counts([1, 1, 0.001], 1000)
    assert c.tolist() == [100, 100, 1] and int(np.prod(c)) == 10_000
    assert grid_counts([1, 0, 1], 1000).tolist() == [0, 0, 0]
    assert grid_counts([[2, 2, 2], [1, 1, 0.001]], 1000).tolist() == [[10, 10, 10], [100, 100, 1]]


def test_penetration_value_examples():
    pv = lambda a, b: float(penetration_value(torch.tensor(a), torch.tensor(b)))
    assert pv(0.5, 0.3) == 0.0
    assert pv(-0.1, -0.1) == pytest.approx(0.02)
    assert pv(-0.3, 0.1) == pytest.approx(0.02)


def test_box_grid_cell_centres_and_volume():
    g = guidance.box_grid(torch.tensor([[0.0, 0, 0]], dtype=torch.float64),
                          torch.tensor([[2.0, 2, 2]], dtype=torch.float64), 1000)
    assert g.points.shape == (1000, 3)
    assert float(g.points.min()) == pytest.approx(0.1) and float(g.points.max()) == pytest.approx(1.9)
    assert float(g.volume_element[0]) == pytest.approx(1e5 * 0.2**3)


# ---------------------------------------------------------------- penetration loss


def mc_pair_integral(ni, nj, n=1_000_000, seed=0):
    lo = np.maximum(ni.t - ni.b / 2, nj.t - nj.b / 2)
    hi = np.minimum(ni.t + ni.b / 2, nj.t + nj.b / 2)
    q = np.random.default_rng(seed).uniform(lo, hi, (n, 3))
    with torch.no_grad():
        psi = penetration_value(sdf_world(q, ni), sdf_world(q, nj)).numpy()
    return float(np.prod(hi - lo) * psi.mean())


def test_disjoint_parts_have_zero_penetration():
    x = latent([part(t=(-0.6, 0, 0)), part(t=(0.6, 0, 0))])
    assert float(loss_penetration(x, GuidanceConfig())) == 0.0


def test_coincident_parts_match_monte_carlo():
    p = part(o=0.9, s=np.zeros(8))
    x = latent([p, p])
    val = float(loss_penetration(x, GuidanceConfig()))
    ref = 2 * 0.81 * 1e5 * mc_pair_integral(as_node(p), as_node(p))
    assert val > 0
    assert val == pytest.approx(ref, rel=0.1)


def test_zero_existence_removes_pair_terms():
    x = latent([part(o=0.0), part(), part(t=(3, 0, 0))])
    assert float(loss_penetration(x, GuidanceConfig())) == 0.0


def test_penetration_symmetric_under_relabeling():
    rng = np.random.default_rng(4)
    ps = [part(o=rng.uniform(0.6, 1.2), t=rng.normal(0, 0.2, 3), b=rng.uniform(0.3, 0.8, 3), s=rng.normal(0, 1, 8))
          for _ in range(4)]
    a = float(loss_penetration(latent(ps), GuidanceConfig()))
    b = float(loss_penetration(latent([ps[2], ps[0], ps[3], ps[1]]), GuidanceConfig()))
    assert a > 0 and abs(a - b) < 1e-9 * max(1.0, a)


def test_penetration_grid_converges_to_monte_carlo():
    pi = part(t=(0.1, 0.05, 0), b=(0.9, 0.7, 0.8), s=np.array([0.5, -0.3, 0.2, 0.4, 0.3, 0, 0, 0]))
    pj = part(t=(-0.2, 0.1, 0.1), b=(0.8, 0.9, 0.6), s=np.array([-0.2, 0.4, 0.1, -0.5, -0.2, 0, 0, 0]))
    ref = 2 * 1e5 * mc_pair_integral(as_node(pi), as_node(pj), n=4_000_000, seed=1)
    vals = [float(loss_penetration(latent([pi, pj]), GuidanceConfig(n_star=n))) for n in (10**3, 10**5, 10**6)]
    assert abs(vals[0] - ref) / ref < 0.02
    assert abs(vals[2] - ref) / ref < 0.005
    assert abs(vals[1] - vals[2]) < abs(vals[0] - vals[2])


# ---------------------------------------------------------------- mobility loss


def cabinet_with(child_t, child_b, l, m, limits, c=(0, 0, 1.0)):
    body = part(t=(0, 0, 0), b=(0.6, 1.0, 1.0))
    child = part(t=child_t, b=child_b)
    return latent([body, child], {(0, 1): (np.array(c), np.array(l, float), np.array(m, float), limits)})


def test_drawer_sliding_away_has_zero_mobility_loss():
    x = cabinet_with((-0.4, 0, 0), (0.15, 0.9, 0.3), [-1, 0, 0], [0, 0, 0], [[0, 0], [0, 0.5]])
    assert float(loss_mobility(x, GuidanceConfig(), np.random.default_rng(0))) == 0.0


def door_latent():
    # hinge on the front-left edge, rotating the door into the body
    hinge = np.array([-0.32, -0.45, 0.0])
    l = np.array([0, 0, -1.0])
    return cabinet_with((-0.33, 0.0, 0), (0.02, 0.9, 0.9), l, np.cross(hinge, l), [[0.3, 1.2], [0, 0]])


def mc_edge(x, gamma, d, n=1_000_000, seed=0):
    f = L.unpack(x[None])
    par = as_node((1.0, f["t"][0, 0].numpy(), f["b"][0, 0].numpy(), f["s"][0, 0].numpy()))
    chi_local = as_node((1.0, np.zeros(3), f["b"][0, 1].numpy(), f["s"][0, 1].numpy()))
    R, tr = child_to_parent(f["l"][0, 0], f["m"][0, 0], torch.tensor(gamma, dtype=torch.float64),
                            torch.tensor(d, dtype=torch.float64), f["t"][0, 0], f["t"][0, 1])
    R, tr = R.numpy(), tr.numpy()
    corners = np.array([[sx, sy, sz] for sx in (-.5, .5) for sy in (-.5, .5) for sz in (-.5, .5)]) * chi_local.b
    moved = corners @ R.T + tr
    lo = np.maximum(moved.min(0), -par.b / 2)
    hi = np.minimum(moved.max(0), par.b / 2)
    if np.any(hi <= lo):
        return 0.0
    q = np.random.default_rng(seed).uniform(lo, hi, (n, 3))
    par_local = as_node((1.0, np.zeros(3), par.b, par.s))
    with torch.no_grad():
        psi = penetration_value(sdf_world(q, par_local), sdf_world((q - tr) @ R, chi_local)).numpy()
    return float(np.prod(hi - lo) * psi.mean())


def test_door_through_body_matches_monte_carlo():
    x = door_latent()
    fractions = torch.tensor([0.3, 0.0, 0.9, 0.0], dtype=torch.float64).reshape(1, 1, 2, 2)
    full = torch.zeros(1, L.E, 2, 2, dtype=torch.float64)
    full[0, 0] = fractions[0, 0]
    val = float(loss_mobility(x, GuidanceConfig(), fractions=full))
    states = [0.3 + u * 0.9 for u in (0.3, 0.9)]
    ref = 2 * 1e5 * sum(mc_edge(x, g, 0.0, seed=k) for k, g in enumerate(states)) / 2
    assert val > 0
    assert val == pytest.approx(ref, rel=0.1)


def test_low_score_edge_is_skipped():
    x = door_latent()
    nodes, edges = L.split(x)
    edges[0, :3] = torch.tensor([0.0, 1.0, 0.05], dtype=torch.float64)
    assert float(loss_mobility(L.join(nodes, edges), GuidanceConfig(), np.random.default_rng(0))) == 0.0


# ---------------------------------------------------------------- combination


def test_zero_weights_skip_all_evaluation(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("SDF evaluated")

    monkeypatch.setattr(guidance, "sdf_box_params", boom)
    assert float(combined_loss(door_latent(), None, GuidanceConfig())) == 0.0


def test_for_terms_divides_base_weights():
    c = GuidanceConfig.for_terms(["pc"])
    assert (c.w_pc, c.w_pen, c.w_mob) == (45.0, 0.0, 0.0)
    c = GuidanceConfig.for_terms(["pc", "pen", "mob"])
    assert c.w_pc == pytest.approx(15.0) and c.w_pen == pytest.approx(2 / 3) and c.w_mob == pytest.approx(2 / 3)
    with pytest.raises(ConfigError):
        GuidanceConfig.for_terms(["color"])


def test_combined_loss_weighted_sum():
    x = door_latent()
    pts = np.random.default_rng(0).normal(0, 0.3, (32, 3))
    fr = guidance.draw_state_fractions(np.random.default_rng(1), 1, L)
    cfg = GuidanceConfig(w_pc=2.0, w_pen=3.0, w_mob=0.5)
    expect = (2 * loss_pointcloud(x, pts, cfg) + 3 * loss_penetration(x, cfg)
              + 0.5 * loss_mobility(x, cfg, fractions=fr[0:1]))
    torch.testing.assert_close(combined_loss(x, pts, cfg, fractions=fr), expect)
    with pytest.raises(ConfigError):
        combined_loss(x, None, GuidanceConfig(w_pc=1.0))


def test_losses_nonnegative_on_random_latents():
    rng = np.random.default_rng(5)
    cfg = GuidanceConfig(w_pc=1, w_pen=1, w_mob=1)
    for _ in range(5):
        x = project(torch.from_numpy(rng.normal(0, 0.5, (2, L.dim))))
        pts = rng.normal(0, 0.5, (32, 3))
        assert torch.all(loss_pointcloud(x, pts, cfg) >= 0)
        assert torch.all(loss_penetration(x, cfg) >= 0)
        assert torch.all(loss_mobility(x, cfg, rng) >= 0)


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ConfigError):
        GuidanceConfig(w_pc=-1).validate()
    with pytest.raises(ConfigError):
        GuidanceConfig(n_g=2000).validate(1000)
    with pytest.raises(ConfigError):
        GuidanceConfig(grad_mode="sideways").validate()
    path = tmp_path / "guide.cfg"
    path.write_text("w_pc = 45  # point cloud\nn_g=250\nstep_clip = none\ngrad_mode = full_chain\n")
    cfg = config_from_mapping(read_config_file(path))
    assert (cfg.w_pc, cfg.n_g, cfg.step_clip, cfg.grad_mode) == (45.0, 250, None, "full_chain")


# ---------------------------------------------------------------- gradients


class Frozen:
    supports_input_grad = False

    def __init__(self, eps):
        self.eps = eps

    def __call__(self, x, t, category=None):
        return self.eps.expand_as(x)


def test_gradient_zero_in_flat_region():
    sch = make_schedule()
    x0 = latent([part(t=(-0.6, 0, 0)), part(t=(0.6, 0, 0))])
    eps = torch.zeros(L.dim, dtype=torch.float64)
    x_t = sch.forward_sample(x0, 10, eps)
    g = loss_gradient(x_t, 10, Frozen(eps), sch, None, GuidanceConfig(w_pen=1.0), eps=eps)
    assert torch.all(g == 0)


def test_posterior_only_is_scaled_x0_gradient():
    sch = make_schedule()
    rng = np.random.default_rng(6)
    eps = torch.from_numpy(rng.normal(size=L.dim))
    x0 = latent([part(o=0.9, t=(0.1, 0, 0)), part(o=0.8, t=(-0.1, 0.1, 0))])
    t = 200
    x_t = sch.forward_sample(x0, t, eps)
    cfg = GuidanceConfig(w_pen=1.0)
    g = loss_gradient(x_t, t, Frozen(eps), sch, None, cfg, eps=eps)
    xv = project(sch.estimate_x0(x_t, t, eps)).clone().requires_grad_(True)
    (g0,) = torch.autograd.grad(combined_loss(xv, None, cfg), xv)
    # projection is the identity on this latent's node blocks
    nodes = slice(0, L.node_size)
    torch.testing.assert_close(g[nodes], g0[nodes] / math.sqrt(sch.alpha_bars[t]))


def test_full_chain_matches_finite_differences_with_oracle():
    sch = make_schedule()
    rng = np.random.default_rng(7)
    mu = latent([part(o=0.9, t=(0.15, 0, 0), b=(0.6, 0.6, 0.6)), part(o=0.9, t=(-0.1, 0.1, 0), b=(0.6, 0.6, 0.6))])
    den = OracleDenoiser(DenoiserSpec("oracle_mixture", means=[mu.tolist(), (mu * 0.9).tolist()],
                                      weights=[0.6, 0.4], sigmas=[0.3, 0.5]), sch)
    t = 30
    x_t = sch.forward_sample(mu, t, torch.from_numpy(rng.normal(size=L.dim)))
    pts = torch.from_numpy(rng.normal(0, 0.3, (40, 3)))
    cfg = GuidanceConfig(w_pc=1.0, w_pen=1.0, grad_mode="full_chain")
    g = loss_gradient(x_t, t, den, sch, pts, cfg)

    def fn(xs):
        tt = torch.full((xs.shape[0],), t)
        x0 = project(sch.estimate_x0(xs, t, den(xs, tt)))
        return combined_loss(x0, pts.expand(xs.shape[0], -1, -1), cfg)

    fd = finite_difference_gradient(fn, x_t)
    assert float(torch.linalg.vector_norm(g - fd) / torch.linalg.vector_norm(fd)) < 1e-4


def test_full_chain_requires_input_gradients():
    sch = make_schedule()
    eps = torch.zeros(L.dim, dtype=torch.float64)
    with pytest.raises(CapabilityError):
        loss_gradient(door_latent(), 5, Frozen(eps), sch, None, GuidanceConfig(w_pen=1.0, grad_mode="full_chain"))
