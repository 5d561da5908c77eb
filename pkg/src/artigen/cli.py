"""Command-line entry point: ``artigen <command> ...``.

Every command accepts ``--seed`` and ``--config`` (a ``key = value`` file whose
keys are option names with dashes replaced by underscores; explicit flags win).
Each run writes ``run_manifest.json`` next to its outputs; ``artigen replay
MANIFEST`` re-executes it.  Exit codes: 0 success, 2 invalid input, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .graph_model import decode, graph_from_json
from .guidance import GuidanceConfig, config_from_mapping, read_config_file

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
CHAIN_CHUNK = 32  # chains per batched sampler call


class UsageError(ValueError):
    pass


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def worker_count() -> int:
    raw = os.environ.get("ARTIGEN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ARTIGEN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("ARTIGEN_THREADS must be at least 1")
    return n


def write_manifest(directory: Path, argv: list[str], args: argparse.Namespace, extra: dict | None = None) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "argv": argv,
        "command": args.command,
        "resolved": resolved,
        "seed": args.seed,
        "git": git_describe(),
        "version": __version__,
        "threads": os.environ.get("ARTIGEN_THREADS", "1"),
    }
    doc.update(extra or {})
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _chain_seeds(seed: int, n: int) -> list[int]:
    return [int(np.random.SeedSequence([seed, k]).generate_state(1)[0]) for k in range(n)]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_dataset_gen(args, argv) -> int:
    from .synthdata import make_dataset, write_dataset

    out = Path(args.out)
    ds = make_dataset(args.per_category, args.seed)
    write_dataset(ds, out)
    write_manifest(out, argv, args, {"dataset_hash": ds.manifest_hash()})
    print(f"wrote {sum(len(v) for v in ds.splits.values())} objects to {out}")
    return EXIT_OK


def cmd_render(args, argv) -> int:
    from .synthdata import render_pointcloud, sample_camera

    graph = graph_from_json(Path(args.object).read_text())
    rng = np.random.default_rng(args.seed)
    pose = sample_camera(graph, rng, args.resolution)
    pc = render_pointcloud(graph, pose, args.points, rng, source_id=Path(args.object).stem)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pc.save(out)
    write_manifest(out.parent, argv, args)
    print(f"rendered {len(pc)} points to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .denoiser import DenoiserSpec, TrainConfig, train
    from .synthdata import CATEGORIES, load_dataset

    ds = load_dataset(Path(args.dataset))
    X, cats = ds.arrays("train")
    spec = DenoiserSpec(kind="trained", layers=args.layers, width=args.width, heads=args.heads,
                        n_categories=len(CATEGORIES), K=ds.K, F=ds.F)
    hp = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, null_prob=args.null_prob)
    ckpt, curve = train(X, cats, spec, hp, seed=args.seed, log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    with open(out.with_suffix(".loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([k, f"{v:.9g}"] for k, v in enumerate(curve))
    write_manifest(out.parent, argv, args, {"final_loss": ckpt.metadata["final_loss"]})
    print(f"saved checkpoint to {out} (final loss {ckpt.metadata['final_loss']:.4f})")
    return EXIT_OK


def _guidance_from_args(args) -> GuidanceConfig:
    if args.guide:
        terms = [t.strip() for t in args.guide.split(",")]
        cfg = GuidanceConfig.for_terms(terms)
    else:
        cfg = GuidanceConfig()
    overrides = {"w_pc": args.w_pc, "w_pen": args.w_pen, "w_mob": args.w_mob, "n_g": args.ng,
                 "grad_mode": args.grad_mode, "step_clip": args.step_clip}
    return config_from_mapping(overrides, cfg)


def cmd_sample(args, argv) -> int:
    from .denoiser import Checkpoint
    from .diffusion import make_schedule, sample_batch, write_latent
    from .metrics import object_mesh
    from .synthdata import PointCloud, category_id

    if args.n < 1:
        raise UsageError("--n must be at least 1")
    ckpt = Checkpoint.load(args.ckpt)
    denoiser = ckpt.denoiser()
    schedule = make_schedule(ckpt.spec.T)
    layout = ckpt.spec.layout
    cfg = _guidance_from_args(args).validate(schedule.T)
    cat = category_id(args.category)
    pts = None
    if args.pointcloud:
        pts = PointCloud.load(args.pointcloud).points
    elif cfg.w_pc > 0:
        raise UsageError("--w-pc > 0 needs --pointcloud")

    seeds = _chain_seeds(args.seed, args.n)
    workers = worker_count()
    # float results depend on batch composition and intra-op threading, so
    # chunks are fixed and independent of the worker count
    chunks = [seeds[k : k + CHAIN_CHUNK] for k in range(0, len(seeds), CHAIN_CHUNK)]
    torch.set_num_threads(1)

    def run(chunk):
        P = None if pts is None else [pts] * len(chunk)
        return sample_batch(denoiser, schedule, cfg, chunk, P, cat, layout)

    if workers == 1 or len(chunks) == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(min(workers, len(chunks))) as pool:
            results = list(pool.map(run, chunks))
    latents = {}
    for chunk, xs in zip(chunks, results):
        for s, x in zip(chunk, xs):
            latents[s] = x

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(seeds):
        x = latents[s]
        graph = decode(x.numpy(), layout, category=args.category)
        stem = out / f"sample_{k:04d}"
        stem.with_suffix(".json").write_text(graph.to_json())
        write_latent(stem.with_suffix(".lat"), x)
        if any(n.exists for n in graph.nodes):
            stem.with_suffix(".obj").write_text(object_mesh(graph, args.resolution).to_obj())
    write_manifest(out, argv, args, {"guidance": cfg.to_dict(), "chain_seeds": seeds})
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _graphs_in(directory: Path):
    directory = Path(directory)
    if (directory / "graphs").is_dir():
        directory = directory / "graphs"
    files = sorted(directory.glob("*.json"))
    files = [f for f in files if f.name != "run_manifest.json" and f.suffix == ".json"]
    graphs = []
    for f in files:
        try:
            graphs.append((f.stem, graph_from_json(f.read_text())))
        except (KeyError, TypeError, json.JSONDecodeError):
            continue
    if not graphs:
        raise UsageError(f"no graph JSON files in {directory}")
    return graphs


def cmd_eval(args, argv) -> int:
    from . import metrics as mt
    from .synthdata import PointCloud

    samples = _graphs_in(args.samples)
    reference = _graphs_in(args.reference)
    P = PointCloud.load(args.pointcloud) if args.pointcloud else None
    rows = []
    for name, g in samples:
        if not any(n.exists for n in g.nodes):
            rows.append({"id": name, "E_pen": None, "E_mob": None})
            continue
        rows.append({"id": name, **mt.sample_metrics(g, P, args.resolution)})
    gen = mt.generative_metrics([g for _, g in samples], [g for _, g in reference], S=args.states,
                                rng=np.random.default_rng(args.seed), n_points=args.points,
                                resolution=args.resolution)
    report = {"guidance": mt.summarize(rows), "generative": gen.to_dict(),
              "n_samples": len(samples), "n_reference": len(reference)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(mt.report_json(report) + "\n")
    out.with_suffix(".txt").write_text(mt.report_table(report))
    out.with_suffix(".csv").write_text(mt.per_sample_csv(rows))
    write_manifest(out.parent, argv, args)
    sys.stdout.write(mt.report_table(report))
    return EXIT_OK


def cmd_selftest(args, argv) -> int:
    from .selftest import run_selftest

    ok = run_selftest(seed=args.seed)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_replay(args, argv) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    return main(doc["argv"])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value file with defaults for this command")

    p = argparse.ArgumentParser(prog="artigen", description="Guided generation of articulated objects.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    gen = ds_sub.add_parser("gen", parents=[common], help="generate a dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--per-category", type=int, default=100)
    gen.set_defaults(func=cmd_dataset_gen)

    r = sub.add_parser("render", parents=[common], help="render a partial point cloud")
    r.add_argument("--object", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--points", type=int, default=1000)
    r.add_argument("--resolution", type=int, default=128)
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("train", parents=[common], help="train the graph denoiser")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--null-prob", type=float, default=0.2)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--width", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw (guided) samples")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pointcloud")
    s.add_argument("--category")
    s.add_argument("--guide", help="comma-separated terms (pc,pen,mob) using the base weights")
    s.add_argument("--w-pc", type=float)
    s.add_argument("--w-pen", type=float)
    s.add_argument("--w-mob", type=float)
    s.add_argument("--ng", type=int)
    s.add_argument("--grad-mode", choices=["posterior_only", "full_chain"])
    s.add_argument("--step-clip")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", parents=[common], help="score samples against a reference set")
    e.add_argument("--samples", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--pointcloud")
    e.add_argument("--out", required=True)
    e.add_argument("--states", type=int, default=4)
    e.add_argument("--points", type=int, default=2048)
    e.add_argument("--resolution", type=int, default=32)
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", parents=[common], help="oracle sampler and gradient checks")
    st.set_defaults(func=cmd_selftest)

    rp = sub.add_parser("replay", parents=[common], help="re-run the command recorded in a run manifest")
    rp.add_argument("manifest")
    rp.set_defaults(func=cmd_replay)
    return p


def _subparser(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.ArgumentParser:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    node = sub.choices[args.command]
    if args.command == "dataset":
        inner = next(a for a in node._actions if isinstance(a, argparse._SubParsersAction))
        node = inner.choices[args.action]
    return node


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        node = _subparser(parser, args)
        known = {a.dest for a in node._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        node.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    except (UsageError, ValueError, OSError) as exc:
        print(f"artigen: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args, argv)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"artigen: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RuntimeError, OSError) as exc:
        print(f"artigen: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
