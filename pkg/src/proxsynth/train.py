"""Deterministic single-process training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .losses import LossWeights, SceneContext, loss_total
from .mesh import CageTransform
from .nets import NetConfig, PlaceNet
from .spatial import PointIndex
from .synth import Dataset

TERMS = ("total", "rec_xs", "rec_xb", "rec_vb", "kl", "l_kl", "coll", "contact")


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg: str, snapshot: Dict):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TrainResult:
    model: PlaceNet
    history: List[Dict[str, float]]


def batch_tensors(ds: Dataset, idx: np.ndarray) -> Dict:
    r = ds.records[idx]
    return {
        "x_s": torch.from_numpy(r["x_s"].astype(np.float32)),
        "x_b": torch.from_numpy(r["x_b"].astype(np.float32)),
        "V_s": torch.from_numpy(r["V_s"].astype(np.float32)),
        "V_b": torch.from_numpy(r["V_b"].astype(np.float32)),
        "transforms": [CageTransform.from_array(t) for t in r["transform"]],
    }


class ContextCache:
    """Scene SDF and vertex index per scene seed, built on first use."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self._cache: Dict[int, SceneContext] = {}

    def __call__(self, i: int) -> SceneContext:
        key = int(self.ds.records["scene_seed"][i])
        if key not in self._cache:
            scene = self.ds.scene(i)
            self._cache[key] = SceneContext(scene.sdf, PointIndex(scene.mesh.vertices))
        return self._cache[key]


def train(ds: Dataset, cfg: TrainConfig, net_cfg: Optional[NetConfig] = None,
          metrics_path: Optional[Union[str, Path]] = None, log=None) -> TrainResult:
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    net_cfg = net_cfg or NetConfig(n_basis=ds.n, n_vertices=ds.n_vertices, basis_seed=ds.basis_seed)
    if (net_cfg.n_basis, net_cfg.n_vertices) != (ds.n, ds.n_vertices):
        raise ValueError("network config does not match dataset dimensions")
    model = PlaceNet(net_cfg)
    with torch.no_grad():
        model.H.template.copy_(torch.from_numpy(ds.records["V_b"].astype(np.float64).mean(0).astype(np.float32)))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    gen = torch.Generator().manual_seed(cfg.seed)
    contexts = ContextCache(ds)
    history = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", *TERMS, "wall_time"])
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            frac = epoch / cfg.epochs
            late = frac >= cfg.weights.late_start
            perm = torch.randperm(len(ds), generator=gen).numpy()
            sums = dict.fromkeys(TERMS, 0.0)
            for b in range(0, len(ds), cfg.batch_size):
                idx = np.sort(perm[b:b + cfg.batch_size])
                batch = batch_tensors(ds, idx)
                eps = torch.randn(len(idx), net_cfg.d_z, generator=gen)
                ctx = [contexts(int(i)) for i in idx] if late else None
                loss, parts = loss_total(model, batch, cfg.weights, frac, eps, ctx)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b // cfg.batch_size}",
                        {"epoch": epoch, "batch_indices": idx.tolist(),
                         "terms": {k: float(v.detach()) for k, v in parts.items()},
                         "state": {k: v.clone() for k, v in model.state_dict().items()}})
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                for k in TERMS:
                    sums[k] += float(parts[k].detach()) * len(idx)
            row = {k: v / len(ds) for k, v in sums.items()}
            row["epoch"] = epoch + 1
            row["wall_time"] = time.perf_counter() - t0
            history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], *(f"{row[k]:.8g}" for k in TERMS), f"{row['wall_time']:.3f}"])
                fh.flush()
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.epochs} total {row['total']:.5f} kl {row['kl']:.4f}")
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return TrainResult(model, history)


@torch.no_grad()
def evaluate_reconstruction(model: PlaceNet, ds: Dataset, baseline_from: Optional[Dataset] = None) -> Dict[str, float]:
    """Held-out L1 of the scene and body features and vertices, against mean predictors.

    The body-feature reconstruction uses the posterior mean (eps = 0).
    """
    b = batch_tensors(ds, np.arange(len(ds)))
    eps = torch.zeros(len(ds), model.cfg.d_z)
    x_b_rec, mu, logvar, _, x_s_rec = model.cvae_forward(b["x_b"], b["x_s"], eps)
    verts, delta = model.regress_body(b["V_s"], x_b_rec)
    V_rec = model.apply_delta(verts, delta)
    ref = baseline_from if baseline_from is not None else ds
    out = {
        "x_s_l1": float((b["x_s"] - x_s_rec).abs().mean()),
        "x_b_l1": float((b["x_b"] - x_b_rec).abs().mean()),
        "V_b_l1": float((b["V_b"] - V_rec).abs().mean()),
    }
    for key, name in (("x_s", "x_s"), ("x_b", "x_b"), ("V_b", "V_b")):
        mean = torch.from_numpy(ref.records[key].astype(np.float64).mean(0).astype(np.float32))
        out[f"{name}_baseline_l1"] = float((b[key] - mean).abs().mean())
    return out
