"""Command-line entry point: gen-data, train, generate, optimize, eval, export-viz."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .body import get_body_model
from .config import ConfigError, RunConfig
from .fitting import VARIANTS as FIT_VARIANTS
from .mesh import TriMesh, save_mesh
from .metrics import EvalReport, evaluate
from .nets import load_checkpoint, save_checkpoint
from .pipeline import GEN_VARIANTS, RAW, GeneratedSample, SceneSource, finish, generate, refine
from .synth import Dataset, build_dataset
from .train import TrainConfig, evaluate_reconstruction, train

log = logging.getLogger("proxsynth")

DATASET_NAME = "dataset.psds"
CHECKPOINT_NAME = "model.psck"


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.load(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ConfigError as exc:
        raise UsageError(f"bad config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    for name, key in (("count", "gen.count"), ("variant", "gen.variant"), ("scene", "gen.scene")):
        val = getattr(args, name, None)
        if val is not None:
            cfg.set(key, val)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    ds = build_dataset(cfg.data_config())
    ds.save(out / DATASET_NAME)
    cfg.write_resolved(out)
    log.info("wrote %d samples (%d train, %d test) to %s", len(ds), len(ds.split("train")),
             len(ds.split("test")), out / DATASET_NAME)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    ds = Dataset.load(args.data)
    train_ds, test_ds = ds.split("train"), ds.split("test")
    tcfg = TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       betas=(cfg["train.beta1"], cfg["train.beta2"]), seed=cfg["seed"],
                       threads=cfg["train.threads"], weights=cfg.loss_weights())
    res = train(train_ds, tcfg, cfg.net_config(ds.n, ds.basis_seed), out / "metrics.csv", log=log.info)
    save_checkpoint(res.model, out / CHECKPOINT_NAME)
    cfg.write_resolved(out)
    if len(test_ds):
        rep = evaluate_reconstruction(res.model, test_ds, train_ds)
        log.info("held-out L1: " + ", ".join(f"{k} {v:.4f}" for k, v in rep.items()))
    return 0


def _write_samples(samples: List[GeneratedSample], out: Path, scene: str) -> None:
    model = get_body_model()
    rows = []
    for s in samples:
        stem = f"sample_{s.index:04d}"
        save_mesh(TriMesh(s.vertices_world, model.faces), out / f"{stem}.obj")
        s.save_npz(out / f"{stem}.npz")
        row = {"sample": s.index, "seed": s.seed, "variant": s.variant, "scene": scene,
               "cage_x": s.transform.cage_center[0], "cage_y": s.transform.cage_center[1],
               "cage_z": s.transform.cage_center[2]}
        row.update({f"loss_{k}": v for k, v in sorted(s.losses.items())})
        row.update(s.scores)
        rows.append(row)
    cols: List[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols or ["sample"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    if any(s.trajectory for s in samples):
        with open(out / "trajectories.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "step", "total"])
            for s in samples:
                for step, val in enumerate(s.trajectory):
                    w.writerow([s.index, step, f"{val:.9g}"])


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    torch.set_num_threads(1)
    net = load_checkpoint(args.checkpoint)
    source = SceneSource.from_spec(cfg["gen.scene"], cfg.data_config())
    variant = cfg["gen.variant"]
    if variant not in GEN_VARIANTS:
        raise UsageError(f"variant must be one of {GEN_VARIANTS}")
    optim = cfg.optim_config(variant) if variant != RAW else None
    samples = generate(net, source, cfg["gen.count"], cfg["seed"], variant, optim,
                       edge=cfg["data.cage_edge"], wall_spacing=cfg["data.wall_spacing"],
                       margin=cfg["gen.cage_margin"])
    _write_samples(samples, out, cfg["gen.scene"])
    cfg.write_resolved(out)
    log.info("generated %d/%d samples in %s", len(samples), cfg["gen.count"], out)
    return 0 if samples else 1


def _load_samples(folder: Path) -> List[GeneratedSample]:
    files = sorted(Path(folder).glob("sample_*.npz"))
    if not files:
        raise UsageError(f"no sample_*.npz files in {folder}")
    return [GeneratedSample.load_npz(f) for f in files]


def cmd_optimize(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    torch.set_num_threads(1)
    if args.variant not in FIT_VARIANTS:
        raise UsageError(f"optimize needs --variant in {FIT_VARIANTS}")
    source = SceneSource.from_spec(cfg["gen.scene"], cfg.data_config())
    optim = cfg.optim_config(args.variant)
    done = []
    for s in _load_samples(args.samples):
        done.append(finish(s, source, args.variant, refine(s, source, optim)))
    _write_samples(done, out, cfg["gen.scene"])
    cfg.write_resolved(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out(args)
    source = SceneSource.from_spec(cfg["gen.scene"], cfg.data_config())
    if source.sdf is None:
        raise UsageError("evaluation needs a scene SDF")
    samples = _load_samples(args.samples)
    params = [s.params for s in samples if s.params is not None]
    rep = evaluate([s.vertices_world for s in samples], params, source.sdf, cfg["eval.k"], cfg["seed"],
                   cfg["eval.include_translation"])
    rep.write(out / "report.csv", out / "report.json")
    cfg.write_resolved(out)
    log.info("non-collision %.4f contact %.4f entropy %.4f cluster size %.4f",
             rep.non_collision, rep.contact, rep.entropy, rep.cluster_size)
    return 0


def normalized_quality(values) -> np.ndarray:
    """Min-max normalization to [0, 1]; a degenerate range maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def export_viz(sample: GeneratedSample, out: Path) -> List[Path]:
    pts = sample.transform.cage_to_world(sample.scene_bps)
    bps_path = out / f"sample_{sample.index:04d}_bps.ply"
    body_path = out / f"sample_{sample.index:04d}_body.ply"
    try:
        save_mesh(TriMesh(pts, np.zeros((0, 3), np.int64), normalized_quality(sample.x_b)), bps_path)
        save_mesh(TriMesh(sample.vertices_world, get_body_model().faces), body_path)
    except OSError as exc:
        raise OSError(f"{out}: {exc}") from exc
    return [bps_path, body_path]


def cmd_export_viz(args) -> int:
    out = _out(args)
    paths = export_viz(GeneratedSample.load_npz(args.sample), out)
    log.info("wrote %s", ", ".join(map(str, paths)))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="proxsynth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key = value config file")
        if seed:
            sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-data", help="build the synthetic training set")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the networks")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset file from gen-data")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample bodies in a scene")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", help="mesh path or synth:SEED")
    sp.add_argument("--count", type=int)
    sp.add_argument("--variant", choices=GEN_VARIANTS)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("optimize", help="re-run body fitting on saved samples")
    common(sp, seed=False)
    sp.add_argument("--samples", required=True, help="directory written by generate")
    sp.add_argument("--scene", help="mesh path or synth:SEED")
    sp.add_argument("--variant", required=True, choices=FIT_VARIANTS)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("eval", help="score saved samples")
    common(sp)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--scene", help="mesh path or synth:SEED")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-viz", help="PLY point cloud of the scene BPS coloured by body feature")
    sp.add_argument("--sample", required=True, help="sample .npz written by generate")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_viz)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime-failure code
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
