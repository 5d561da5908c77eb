"""Procedural articulated objects and depth-camera partial point clouds.

Objects use a z-up canonical frame with their articulated side facing -x, so
the camera azimuth range 120-240 degrees looks at the front.  Children sit
outside their parent with a 2% clearance and move away from it, which keeps
every ground-truth object free of penetration over its whole joint range.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .graph_model import ArticulationGraph, JointEdge, PartNode, encode, graph_from_json
from .shape_sdf import scene_sdf

CATEGORIES = ["cabinet_drawers", "cabinet_doors", "laptop", "table_drawer"]
GAP = 0.02
F_DEFAULT = 8
ELEVATION = (30.0, 80.0)
AZIMUTH = (120.0, 240.0)
DISTANCE = (1.0, 6.0)
MAX_TRIALS = 1000


class RenderError(RuntimeError):
    pass


def category_id(name: str | None) -> int | None:
    if name is None:
        return None
    if name not in CATEGORIES:
        raise ValueError(f"unknown category {name!r}; expected one of {CATEGORIES}")
    return CATEGORIES.index(name)


# --------------------------------------------------------------------------
# object generator
# --------------------------------------------------------------------------


def _shape_latent(rng: np.random.Generator, F: int) -> np.ndarray:
    s = np.zeros(F)
    s[0:3] = rng.uniform(2.5, 4.0, 3)  # box nearly fills its bbox
    s[3] = rng.uniform(-4.0, -2.0)  # small corner rounding
    return s


def _joint(axis, point, limits) -> JointEdge:
    l = np.asarray(axis, dtype=np.float64)
    l = l / np.linalg.norm(l)
    return JointEdge(l, np.cross(np.asarray(point, dtype=np.float64), l), np.asarray(limits, dtype=np.float64))


class _Builder:
    def __init__(self, rng: np.random.Generator, F: int):
        self.rng = rng
        self.F = F
        self.nodes: list[PartNode] = []
        self.edges: list[tuple[int, int, JointEdge]] = []

    def part(self, center, size) -> int:
        self.nodes.append(PartNode(True, center, size, _shape_latent(self.rng, self.F)))
        return len(self.nodes) - 1

    def joint(self, parent: int, child: int, axis, world_point, limits) -> None:
        local = np.asarray(world_point, dtype=np.float64) - self.nodes[parent].t
        self.edges.append((parent, child, _joint(axis, local, limits)))

    def finish(self, category: str) -> ArticulationGraph:
        lo = np.min([n.t - n.b / 2 for n in self.nodes], axis=0)
        hi = np.max([n.t + n.b / 2 for n in self.nodes], axis=0)
        shift = -(lo + hi) / 2
        for n in self.nodes:
            n.t = n.t + shift
        return ArticulationGraph(self.nodes, self.edges, category)


def _cabinet_drawers(b: _Builder) -> None:
    rng = b.rng
    D, W, H = rng.uniform(0.4, 0.8), rng.uniform(0.6, 1.2), rng.uniform(0.6, 1.4)
    body = b.part([0, 0, 0], [D, W, H])
    n = int(rng.integers(1, 4))
    depth = rng.uniform(0.08, 0.2)
    slot = (H - (n + 1) * GAP) / n
    x = -D / 2 - GAP - depth / 2
    travel = rng.uniform(0.3, 0.8) * D
    for k in range(n):
        z = -H / 2 + GAP + slot / 2 + k * (slot + GAP)
        drawer = b.part([x, 0, z], [depth, W - 2 * GAP, slot])
        b.joint(body, drawer, [-1, 0, 0], [x, 0, z], [[0, 0], [0, travel]])


def _cabinet_doors(b: _Builder) -> None:
    rng = b.rng
    D, W, H = rng.uniform(0.4, 0.8), rng.uniform(0.6, 1.2), rng.uniform(0.6, 1.4)
    body = b.part([0, 0, 0], [D, W, H])
    n = int(rng.integers(1, 3))
    th = rng.uniform(0.02, 0.05)
    back = -D / 2 - GAP  # door back face
    width = (W - (n + 1) * GAP) / n
    swing = rng.uniform(0.4, 0.5) * np.pi
    for k in range(n):
        y_lo = -W / 2 + GAP + k * (width + GAP)
        door = b.part([back - th / 2, y_lo + width / 2, 0], [th, width, H - 2 * GAP])
        if k == 0:  # hinge on the -y edge, opens with positive angle about +z
            b.joint(body, door, [0, 0, 1], [back, y_lo, 0], [[0, swing], [0, 0]])
        else:  # hinge on the +y edge
            b.joint(body, door, [0, 0, -1], [back, y_lo + width, 0], [[0, swing], [0, 0]])


def _laptop(b: _Builder) -> None:
    rng = b.rng
    D, W = rng.uniform(0.5, 0.8), rng.uniform(0.6, 1.0)
    th_b, th_s = rng.uniform(0.03, 0.06), rng.uniform(0.015, 0.035)
    base = b.part([0, 0, 0], [D, W, th_b])
    hinge_z = th_b / 2 + GAP
    screen = b.part([0, 0, hinge_z + th_s / 2], [D, W, th_s])
    b.joint(base, screen, [0, 1, 0], [D / 2, 0, hinge_z], [[0, rng.uniform(0.5, 0.6) * np.pi], [0, 0]])


def _table_drawer(b: _Builder) -> None:
    rng = b.rng
    D, W, H = rng.uniform(0.5, 0.9), rng.uniform(0.8, 1.4), rng.uniform(0.6, 1.0)
    th_t, th_p = rng.uniform(0.03, 0.06), rng.uniform(0.03, 0.08)
    top = b.part([0, 0, H / 2 - th_t / 2], [D, W, th_t])
    leg_h = H - th_t - GAP
    for side in (-1, 1):
        leg = b.part([0, side * (W / 2 - th_p / 2), -H / 2 + leg_h / 2], [D, th_p, leg_h])
        b.joint(top, leg, [0, 0, 1], [0, side * (W / 2 - th_p / 2), 0], [[0, 0], [0, 0]])
    h_d = rng.uniform(0.1, 0.2) * H
    D_d = rng.uniform(0.6, 0.9) * D
    z = H / 2 - th_t - GAP - h_d / 2
    x = -D / 2 + D_d / 2
    drawer = b.part([x, 0, z], [D_d, W - 2 * th_p - 2 * GAP, h_d])
    b.joint(top, drawer, [-1, 0, 0], [x, 0, z], [[0, 0], [0, rng.uniform(0.4, 0.8) * D_d]])


_GENERATORS = {
    "cabinet_drawers": _cabinet_drawers,
    "cabinet_doors": _cabinet_doors,
    "laptop": _laptop,
    "table_drawer": _table_drawer,
}


def generate_object(category: str | int, rng: np.random.Generator, F: int = F_DEFAULT) -> ArticulationGraph:
    name = CATEGORIES[category] if isinstance(category, (int, np.integer)) else category
    if name not in _GENERATORS:
        raise ValueError(f"unknown category {category!r}")
    builder = _Builder(rng, F)
    _GENERATORS[name](builder)
    return builder.finish(name)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class Record:
    id: str
    category: str
    graph: ArticulationGraph
    latent: np.ndarray


@dataclass
class Dataset:
    seed: int
    n_per_category: int
    K: int
    F: int
    splits: dict[str, list[Record]] = field(default_factory=dict)

    def records(self, split: str) -> list[Record]:
        return self.splits[split]

    def arrays(self, split: str) -> tuple[np.ndarray, list[int]]:
        recs = self.splits[split]
        return np.stack([r.latent for r in recs]), [CATEGORIES.index(r.category) for r in recs]

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "n_per_category": self.n_per_category,
            "K": self.K,
            "F": self.F,
            "categories": CATEGORIES,
            "splits": {k: [r.id for r in v] for k, v in self.splits.items()},
            "files": {
                r.id: {"graph": f"graphs/{r.id}.json", "latent": f"latents/{r.id}.lat", "category": r.category}
                for recs in self.splits.values()
                for r in recs
            },
        }

    def manifest_hash(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode())
        for split in sorted(self.splits):
            for r in self.splits[split]:
                h.update(r.graph.to_json().encode())
        return h.hexdigest()


def make_dataset(n_per_category: int, seed: int = 0, K: int = 8, F: int = F_DEFAULT) -> Dataset:
    """Per-category 80/10/10 split of freshly generated objects."""
    if n_per_category < 10:
        raise ValueError("need at least 10 objects per category")
    root = np.random.SeedSequence(seed)
    splits: dict[str, list[Record]] = {"train": [], "val": [], "test": []}
    for cat_seq, name in zip(root.spawn(len(CATEGORIES)), CATEGORIES):
        recs = []
        for k, obj_seq in enumerate(cat_seq.spawn(n_per_category)):
            g = generate_object(name, np.random.default_rng(obj_seq), F)
            recs.append(Record(f"{name}_{k:05d}", name, g, encode(g, K, F)))
        order = np.random.default_rng(cat_seq.spawn(1)[0]).permutation(n_per_category)
        n_train = int(round(0.8 * n_per_category))
        n_val = int(round(0.1 * n_per_category))
        splits["train"] += [recs[i] for i in order[:n_train]]
        splits["val"] += [recs[i] for i in order[n_train : n_train + n_val]]
        splits["test"] += [recs[i] for i in order[n_train + n_val :]]
    return Dataset(seed, n_per_category, K, F, splits)


def write_dataset(ds: Dataset, out: Path) -> None:
    from .diffusion import write_latent

    out = Path(out)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    (out / "latents").mkdir(parents=True, exist_ok=True)
    for recs in ds.splits.values():
        for r in recs:
            (out / "graphs" / f"{r.id}.json").write_text(r.graph.to_json())
            write_latent(out / "latents" / f"{r.id}.lat", r.latent)
    manifest = ds.manifest()
    manifest["hash"] = ds.manifest_hash()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path: Path) -> Dataset:
    from .diffusion import read_latent

    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    splits = {}
    for split, ids in man["splits"].items():
        recs = []
        for i in ids:
            entry = man["files"][i]
            g = graph_from_json((path / entry["graph"]).read_text())
            recs.append(Record(i, entry["category"], g, read_latent(path / entry["latent"])))
        splits[split] = recs
    return Dataset(man["seed"], man["n_per_category"], man["K"], man["F"], splits)


# --------------------------------------------------------------------------
# cameras and rendering
# --------------------------------------------------------------------------


@dataclass
class CameraPose:
    elevation: float
    azimuth: float
    distance: float
    resolution: int = 128
    fov: float = 60.0

    @property
    def position(self) -> np.ndarray:
        el, az = np.radians(self.elevation), np.radians(self.azimuth)
        return self.distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Forward, right and up unit vectors of a camera looking at the origin."""
        fwd = -self.position / np.linalg.norm(self.position)
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        return fwd, right, np.cross(right, fwd)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(col, row)`` and depths of world points."""
        fwd, right, up = self.basis()
        v = np.asarray(points) - self.position
        depth = v @ fwd
        f = 1.0 / np.tan(np.radians(self.fov) / 2)
        safe = np.where(depth > 1e-9, depth, 1e-9)
        xn = f * (v @ right) / safe
        yn = f * (v @ up) / safe
        cols = (xn + 1.0) / 2.0 * self.resolution
        rows = (1.0 - yn) / 2.0 * self.resolution
        return np.stack([cols, rows], axis=-1), depth

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        fwd, right, up = self.basis()
        R = self.resolution
        tan = np.tan(np.radians(self.fov) / 2)
        c = ((np.arange(R) + 0.5) / R * 2.0 - 1.0) * tan
        xs, ys = np.meshgrid(c, -c)  # rows top to bottom
        d = fwd + xs[..., None] * right + ys[..., None] * up
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.position, d.shape).reshape(-1, 3), d.reshape(-1, 3)

    def to_dict(self) -> dict:
        return asdict(self)


def object_corners(graph: ArticulationGraph) -> np.ndarray:
    lo = np.min([n.t - n.b / 2 for n in graph.nodes if n.exists], axis=0)
    hi = np.max([n.t + n.b / 2 for n in graph.nodes if n.exists], axis=0)
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def pose_acceptable(graph: ArticulationGraph, pose: CameraPose) -> bool:
    """Object bbox fully in view and spanning at least half the image in some axis."""
    pix, depth = pose.project(object_corners(graph))
    if np.any(depth <= 0):
        return False
    R = pose.resolution
    if np.any(pix < 0) or np.any(pix > R):
        return False
    span = (pix.max(axis=0) - pix.min(axis=0)) / R
    return not (span[0] < 0.5 and span[1] < 0.5)


def sample_camera(graph: ArticulationGraph, rng: np.random.Generator, resolution: int = 128) -> CameraPose:
    if not graph.existing:
        raise RenderError("cannot place a camera for an empty object")
    for _ in range(MAX_TRIALS):
        pose = CameraPose(
            float(rng.uniform(*ELEVATION)),
            float(rng.uniform(*AZIMUTH)),
            float(rng.uniform(*DISTANCE)),
            resolution,
        )
        if pose_acceptable(graph, pose):
            return pose
    raise RenderError(f"no valid camera pose after {MAX_TRIALS} trials")


@dataclass
class PointCloud:
    points: np.ndarray
    pose: CameraPose | None = None
    source_id: str | None = None

    def __len__(self) -> int:
        return len(self.points)

    def to_ply(self) -> str:
        head = ["ply", "format ascii 1.0", f"element vertex {len(self.points)}",
                "property float x", "property float y", "property float z", "end_header"]
        body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.points]
        return "\n".join(head + body) + "\n"

    def sidecar(self) -> dict:
        return {"source_id": self.source_id, "camera": None if self.pose is None else self.pose.to_dict(),
                "n_points": len(self.points)}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_ply())
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "PointCloud":
        path = Path(path)
        lines = path.read_text().splitlines()
        n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
        start = lines.index("end_header") + 1
        pts = np.array([[float(v) for v in l.split()[:3]] for l in lines[start : start + n]]).reshape(-1, 3)
        pose, source = None, None
        side = path.with_suffix(".json")
        if side.exists():
            meta = json.loads(side.read_text())
            pose = CameraPose(**meta["camera"]) if meta.get("camera") else None
            source = meta.get("source_id")
        return cls(pts, pose, source)


def sphere_trace(graph: ArticulationGraph, origins: np.ndarray, dirs: np.ndarray,
                 max_steps: int = 128, tol: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """March rays against the union SDF; returns ``(hit mask, hit points)``."""
    corners = object_corners(graph)
    center = corners.mean(axis=0)
    radius = np.linalg.norm(corners - center, axis=1).max()
    oc = origins - center
    t_near = np.maximum(-(oc * dirs).sum(-1) - radius, 0.0)
    t_far = np.linalg.norm(oc, axis=1) + radius
    t = t_near.copy()
    hit = np.zeros(len(t), dtype=bool)
    active = np.ones(len(t), dtype=bool)
    parts = [n for n in graph.nodes if n.exists]
    with torch.no_grad():
        for _ in range(max_steps):
            idx = np.nonzero(active)[0]
            if len(idx) == 0:
                break
            p = origins[idx] + t[idx, None] * dirs[idx]
            d = scene_sdf(torch.from_numpy(p), parts).numpy()
            done = d < tol
            hit[idx[done]] = True
            active[idx[done]] = False
            t[idx[~done]] += d[~done]
            gone = t > t_far
            active &= ~gone
    return hit, origins + t[:, None] * dirs


def render_pointcloud(graph: ArticulationGraph, pose: CameraPose, M: int = 1000,
                      rng: np.random.Generator | None = None, source_id: str | None = None) -> PointCloud:
    """Sample ``M`` visible surface points (object frame) from the depth mask."""
    rng = rng if rng is not None else np.random.default_rng(0)
    origins, dirs = pose.rays()
    hit, pts = sphere_trace(graph, origins, dirs)
    hits = pts[hit]
    if len(hits) == 0:
        raise RenderError("camera sees no surface")
    idx = rng.choice(len(hits), size=M, replace=len(hits) < M)
    return PointCloud(hits[idx], pose, source_id)
