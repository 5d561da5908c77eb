"""Noise predictors: closed-form oracles and a small attentional graph network.

Every backend is a callable ``eps(x_t, t, category) -> eps_hat`` on ``(B, D)``
float64 tensors with ``t`` a ``(B,)`` long tensor of 1-based steps.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .diffusion import NoiseSchedule, make_schedule
from .graph_model import Layout

MAGIC = b"ARTG"
VERSION = 1
ORACLE_KINDS = ("oracle_gaussian", "oracle_mixture")


class BackendError(TypeError):
    pass


@dataclass
class DenoiserSpec:
    kind: str
    # oracle
    means: list[list[float]] | None = None
    weights: list[float] | None = None
    sigmas: list[float] | None = None
    # trained network
    layers: int = 4
    width: int = 128
    heads: int = 4
    n_categories: int = 4
    K: int = 8
    F: int = 8
    T: int = 1000

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS + ("trained",):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if self.kind in ORACLE_KINDS:
            if not self.means:
                raise ValueError("oracle needs component means")
            n = len(self.means)
            self.weights = list(self.weights) if self.weights is not None else [1.0 / n] * n
            self.sigmas = list(self.sigmas) if self.sigmas is not None else [1.0] * n
            if len(self.weights) != n or len(self.sigmas) != n:
                raise ValueError("means, weights and sigmas must have equal length")
            if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
                raise ValueError("mixture weights must be nonnegative and sum to 1")
            if min(self.sigmas) <= 0:
                raise ValueError("component sigmas must be positive")
        elif min(self.layers, self.width, self.heads, self.n_categories) <= 0 or self.width % self.heads:
            raise ValueError("network sizes must be positive and width divisible by heads")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @property
    def layout(self) -> Layout:
        return Layout(self.K, self.F)


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------


def oracle_eps(x_t: Tensor, t, spec: DenoiserSpec, schedule: NoiseSchedule) -> Tensor:
    """Exact noise prediction for a Gaussian mixture data distribution."""
    if spec.kind not in ORACLE_KINDS:
        raise BackendError("oracle_eps needs an oracle spec")
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    single = x_t.ndim == 1
    x = x_t.unsqueeze(0) if single else x_t
    t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
    abar = torch.from_numpy(schedule.alpha_bars)[t].unsqueeze(-1)  # (B, 1)
    mu = torch.as_tensor(spec.means, dtype=torch.float64)  # (C, D)
    var = abar * torch.as_tensor(spec.sigmas, dtype=torch.float64) ** 2 + (1.0 - abar)  # (B, C)
    diff = x.unsqueeze(1) - abar.sqrt().unsqueeze(-1) * mu  # (B, C, D)
    D = x.shape[-1]
    logp = (
        torch.log(torch.as_tensor(spec.weights, dtype=torch.float64))
        - 0.5 * (diff * diff).sum(-1) / var
        - 0.5 * D * torch.log(var)
    )
    resp = torch.softmax(logp, dim=-1)  # (B, C)
    score = -(resp.unsqueeze(-1) * diff / var.unsqueeze(-1)).sum(1)
    eps = -torch.sqrt(1.0 - abar) * score
    return eps[0] if single else eps


class OracleDenoiser:
    supports_input_grad = True

    def __init__(self, spec: DenoiserSpec, schedule: NoiseSchedule):
        if spec.kind not in ORACLE_KINDS:
            raise BackendError("OracleDenoiser needs an oracle spec")
        self.spec = spec
        self.schedule = schedule

    def __call__(self, x_t: Tensor, t: Tensor, category=None) -> Tensor:
        return oracle_eps(x_t, t, self.spec, self.schedule)


# --------------------------------------------------------------------------
# attentional graph network
# --------------------------------------------------------------------------


def timestep_embedding(t: Tensor, width: int) -> Tensor:
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class GraphBlock(nn.Module):
    def __init__(self, width: int, heads: int, incidence: Tensor, pairs: Tensor):
        super().__init__()
        self.norm_attn = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_msg = nn.LayerNorm(width)
        self.node_to_edge = nn.Linear(width, width)
        self.edge_to_node = nn.Linear(width, width)
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.SiLU(), nn.Linear(2 * width, width))
        self.register_buffer("incidence", incidence, persistent=False)
        self.register_buffer("pairs", pairs, persistent=False)

    def forward(self, h: Tensor, K: int) -> Tensor:
        a = self.norm_attn(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        m = self.norm_msg(h)
        nodes, edges = m[:, :K], m[:, K:]
        # symmetric endpoint aggregation keeps the block node-permutation equivariant
        to_edge = self.node_to_edge(nodes[:, self.pairs[:, 0]] + nodes[:, self.pairs[:, 1]])
        to_node = self.edge_to_node(torch.einsum("ke,bew->bkw", self.incidence, edges))
        h = h + torch.cat([to_node, to_edge], dim=1)
        return h + self.mlp(self.norm_mlp(h))


class GraphDenoiserNet(nn.Module):
    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        layout = spec.layout
        self.K = layout.K
        self.layout = layout
        W = spec.width
        pairs = torch.from_numpy(layout.pair_array) if layout.E else torch.zeros((0, 2), dtype=torch.long)
        incidence = torch.zeros(layout.K, layout.E)
        for e, (i, j) in enumerate(layout.pairs):
            incidence[i, e] = incidence[j, e] = 1.0 / max(layout.K - 1, 1)
        self.width = W
        self.null_category = spec.n_categories
        self.node_in = nn.Linear(layout.node_dim, W)
        self.edge_in = nn.Linear(layout.edge_dim, W)
        self.token_type = nn.Parameter(torch.zeros(2, W))
        self.time_mlp = nn.Sequential(nn.Linear(W, W), nn.SiLU(), nn.Linear(W, W))
        self.category = nn.Embedding(spec.n_categories + 1, W)
        self.blocks = nn.ModuleList(GraphBlock(W, spec.heads, incidence, pairs) for _ in range(spec.layers))
        self.norm_out = nn.LayerNorm(W)
        self.node_out = nn.Linear(W, layout.node_dim)
        self.edge_out = nn.Linear(W, layout.edge_dim)

    def forward(self, x: Tensor, t: Tensor, category: Tensor) -> Tensor:
        nodes, edges = self.layout.split(x)
        cond = self.time_mlp(timestep_embedding(t, self.width)) + self.category(category)
        h = torch.cat([self.node_in(nodes) + self.token_type[0], self.edge_in(edges) + self.token_type[1]], dim=1)
        h = h + cond.unsqueeze(1)
        for block in self.blocks:
            h = block(h, self.K)
        h = self.norm_out(h)
        return self.layout.join(self.node_out(h[:, : self.K]), self.edge_out(h[:, self.K :]))


class TrainedDenoiser:
    supports_input_grad = True

    def __init__(self, spec: DenoiserSpec, net: GraphDenoiserNet):
        self.spec = spec
        self.net = net.eval()

    def category_tensor(self, category, batch: int) -> Tensor:
        if category is None or isinstance(category, (int, np.integer)):
            category = [category] * batch
        ids = []
        for c in category:
            if c is None:
                ids.append(self.spec.n_categories)
            elif 0 <= int(c) < self.spec.n_categories:
                ids.append(int(c))
            else:
                raise ValueError(f"unknown category id {c}")
        if len(ids) != batch:
            raise ValueError("need one category per latent")
        return torch.tensor(ids, dtype=torch.long)

    def __call__(self, x_t: Tensor, t: Tensor, category=None) -> Tensor:
        x = torch.as_tensor(x_t)
        single = x.ndim == 1
        x = x.unsqueeze(0) if single else x
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        out = self.net(x.to(torch.float32), t, self.category_tensor(category, x.shape[0]))
        out = out.to(torch.float64)
        return out[0] if single else out


def trained_eps(x_t, t, category, checkpoint: "Checkpoint") -> Tensor:
    return checkpoint.denoiser()(x_t, t, category)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: DenoiserSpec
    params: np.ndarray  # float32 blob in state_dict order
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, spec: DenoiserSpec, net: nn.Module, metadata: dict | None = None) -> "Checkpoint":
        flat = [v.detach().cpu().to(torch.float32).reshape(-1) for v in net.state_dict().values()]
        return cls(spec, torch.cat(flat).numpy().copy(), dict(metadata or {}))

    def build_net(self) -> GraphDenoiserNet:
        net = GraphDenoiserNet(self.spec)
        state = net.state_dict()
        expected = sum(v.numel() for v in state.values())
        if expected != self.params.size:
            raise ValueError(f"parameter blob has {self.params.size} values, spec needs {expected}")
        offset = 0
        blob = torch.from_numpy(self.params.astype(np.float32))
        for key, value in state.items():
            n = value.numel()
            state[key] = blob[offset : offset + n].reshape(value.shape).clone()
            offset += n
        net.load_state_dict(state)
        return net

    def denoiser(self) -> TrainedDenoiser:
        return TrainedDenoiser(self.spec, self.build_net())

    def header(self) -> str:
        return json.dumps({"spec": asdict(self.spec), "metadata": self.metadata}, sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        head = self.header().encode()
        blob = np.asarray(self.params, dtype="<f4").tobytes()
        Path(path).write_bytes(MAGIC + struct.pack("<II", VERSION, len(head)) + head + blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError("not an ARTG checkpoint")
        version, n = struct.unpack("<II", raw[4:12])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        doc = json.loads(raw[12 : 12 + n].decode())
        params = np.frombuffer(raw[12 + n :], dtype="<f4").copy()
        ckpt = cls(DenoiserSpec(**doc["spec"]), params, doc["metadata"])
        ckpt.build_net()  # validates the blob length
        return ckpt


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3
    null_prob: float = 0.2
    shuffle_labels: bool = False


def dataset_hash(latents: np.ndarray, categories: Sequence[int | None]) -> str:
    h = hashlib.sha256(np.ascontiguousarray(latents, dtype="<f8").tobytes())
    h.update(json.dumps([None if c is None else int(c) for c in categories]).encode())
    return h.hexdigest()[:16]


def _category_ids(categories, n_categories: int) -> np.ndarray:
    return np.array([n_categories if c is None else int(c) for c in categories], dtype=np.int64)


def train(
    latents: np.ndarray,
    categories: Sequence[int | None],
    spec: DenoiserSpec,
    hp: TrainConfig | None = None,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[Checkpoint, list[float]]:
    """Minimize the noise-prediction MSE; returns the checkpoint and loss curve."""
    hp = hp or TrainConfig()
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] == 0:
        raise ValueError("training needs a nonempty (N, D) latent array")
    if latents.shape[1] != spec.layout.dim:
        raise ValueError(f"latent dimension {latents.shape[1]} does not match spec ({spec.layout.dim})")
    schedule = make_schedule(spec.T)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    labels = _category_ids(categories, spec.n_categories)
    if hp.shuffle_labels:
        labels = rng.permutation(labels)
    net = GraphDenoiserNet(spec)
    opt = torch.optim.Adam(net.parameters(), lr=hp.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(hp.steps, 1))
    data = torch.from_numpy(latents).to(torch.float32)
    abar = torch.from_numpy(schedule.alpha_bars).to(torch.float32)
    curve = []
    net.train()
    for step in range(hp.steps):
        idx = torch.from_numpy(rng.integers(0, len(data), hp.batch_size))
        t = torch.from_numpy(rng.integers(1, spec.T + 1, hp.batch_size))
        eps = torch.from_numpy(rng.standard_normal((hp.batch_size, data.shape[1]))).to(torch.float32)
        cats = torch.from_numpy(labels[idx.numpy()].copy())
        drop = torch.from_numpy(rng.uniform(size=hp.batch_size) < hp.null_prob)
        cats = torch.where(drop, torch.full_like(cats, spec.n_categories), cats)
        a = abar[t].unsqueeze(-1)
        x_t = a.sqrt() * data[idx] + (1 - a).sqrt() * eps
        loss = ((net(x_t, t, cats) - eps) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        curve.append(loss.item())
        if log_every and (step % log_every == 0 or step == hp.steps - 1):
            print(f"step {step:6d}  loss {np.mean(curve[-log_every:]):.4f}", flush=True)
    net.eval()
    meta = {
        "steps": hp.steps,
        "final_loss": float(np.mean(curve[-min(len(curve), 100):])) if curve else None,
        "dataset_hash": dataset_hash(latents, categories),
        "seed": seed,
    }
    return Checkpoint.from_net(spec, net, meta), curve


@torch.no_grad()
def validation_loss(
    denoiser: TrainedDenoiser,
    latents: np.ndarray,
    categories: Sequence[int | None],
    seed: int = 0,
    repeats: int = 4,
) -> float:
    """Noise-prediction MSE with fixed noise draws (common random numbers)."""
    spec = denoiser.spec
    schedule = make_schedule(spec.T)
    rng = np.random.default_rng(seed)
    x0 = torch.from_numpy(np.repeat(np.asarray(latents, dtype=np.float64), repeats, axis=0))
    cats = [c for c in categories for _ in range(repeats)]
    t = torch.from_numpy(rng.integers(1, spec.T + 1, len(x0)))
    eps = torch.from_numpy(rng.standard_normal(x0.shape))
    a = torch.from_numpy(schedule.alpha_bars)[t].unsqueeze(-1)
    x_t = a.sqrt() * x0 + (1 - a).sqrt() * eps
    return float(((denoiser(x_t, t, cats) - eps) ** 2).mean())
