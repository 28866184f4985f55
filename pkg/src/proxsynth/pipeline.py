"""Sampling bodies in a scene with a trained network, then optional parameter fitting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .body import BodyParams, get_body_model
from .bps import BasisPointSet, encode_scene, make_basis
from .fitting import FitDivergedError, OptimConfig, OptimResult, fit_body
from .mesh import CageTransform, EmptyRegionError, TriMesh, crop_local_scene, load_mesh
from .metrics import contact_score, non_collision_score
from .nets import PlaceNet
from .spatial import GridSdf, PointIndex, SdfDomainError, SdfField
from .synth import CageFitError, generate_scene, scene_for_seed, DataConfig

log = logging.getLogger(__name__)

RAW = "raw"
GEN_VARIANTS = (RAW, "simoptim", "advoptim")


@dataclass
class SceneSource:
    """A scene mesh with its SDF and the xy region cages may be centred in."""

    mesh: TriMesh
    sdf: Optional[SdfField]
    xy_lo: np.ndarray
    xy_hi: np.ndarray
    floor_z: float = 0.0
    name: str = ""
    _index: Optional[PointIndex] = field(default=None, repr=False)

    @property
    def index(self) -> PointIndex:
        if self._index is None:
            self._index = PointIndex(self.mesh.vertices)
        return self._index

    @classmethod
    def from_spec(cls, spec: str, data_cfg: Optional[DataConfig] = None) -> "SceneSource":
        """``synth:SEED`` builds a synthetic room; otherwise ``spec`` is a mesh path.

        A mesh path may have a ``.psdf`` grid SDF next to it (same stem).
        """
        if spec.startswith("synth:"):
            try:
                seed = int(spec.split(":", 1)[1])
            except ValueError:
                raise ValueError(f"bad synthetic scene spec {spec!r}; expected synth:SEED") from None
            _, _, scene = scene_for_seed(seed, data_cfg or DataConfig())
            lo, hi = scene.floor_region
            return cls(scene.mesh, scene.sdf, lo, hi, 0.0, spec)
        path = Path(spec)
        mesh = load_mesh(path)
        sdf_path = path.with_suffix(".psdf")
        sdf = GridSdf.load(sdf_path) if sdf_path.is_file() else None
        v = mesh.vertices
        return cls(mesh, sdf, v[:, :2].min(0), v[:, :2].max(0), float(v[:, 2].min()), str(path))


@dataclass
class GeneratedSample:
    index: int
    seed: int
    transform: CageTransform
    scene_bps: np.ndarray          # cage frame
    x_b: np.ndarray                # generated body feature
    raw_vertices: np.ndarray       # cage frame, straight from the regressor
    variant: str = RAW
    vertices_world: Optional[np.ndarray] = None
    params: Optional[BodyParams] = None
    losses: Dict[str, float] = field(default_factory=dict)
    scores: Dict[str, float] = field(default_factory=dict)
    trajectory: List[float] = field(default_factory=list)

    @property
    def raw_world(self) -> np.ndarray:
        return self.transform.cage_to_world(self.raw_vertices)

    def save_npz(self, path: Union[str, Path]) -> None:
        np.savez(path, index=self.index, seed=self.seed, transform=self.transform.to_array(),
                 scene_bps=self.scene_bps, x_b=self.x_b, raw_vertices=self.raw_vertices,
                 variant=self.variant,
                 vertices_world=self.vertices_world if self.vertices_world is not None else self.raw_world,
                 params=self.params.to_vector() if self.params is not None else np.zeros(0))

    @classmethod
    def load_npz(cls, path: Union[str, Path]) -> "GeneratedSample":
        with np.load(path) as z:
            params = BodyParams.from_vector(z["params"]) if z["params"].size else None
            return cls(int(z["index"]), int(z["seed"]), CageTransform.from_array(z["transform"]),
                       z["scene_bps"], z["x_b"], z["raw_vertices"], str(z["variant"]),
                       z["vertices_world"], params)


def random_cage(source: SceneSource, rng: np.random.Generator, edge: float, margin: float) -> CageTransform:
    lo, hi = source.xy_lo + margin, source.xy_hi - margin
    if np.any(hi < lo):
        raise CageFitError(f"scene {source.name} is too small for a cage with margin {margin} m")
    xy = rng.uniform(lo, hi)
    return CageTransform.for_cage(np.array([xy[0], xy[1], source.floor_z + edge / 2]), edge)


def sample_one(net: PlaceNet, source: SceneSource, basis: BasisPointSet, index: int, seed: int,
               edge: float = 2.0, wall_spacing: float = 0.25, margin: float = 0.5) -> GeneratedSample:
    """Random cage, scene encoding, z ~ N(0, I), decoded body feature, regressed vertices."""
    rng = np.random.default_rng(seed)
    tr = random_cage(source, rng, edge, margin)
    local = crop_local_scene(source.mesh, tr.cage_center, edge, wall_spacing)
    enc = encode_scene(basis, tr.world_to_cage(local.points), tr, local.cage_flags)
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(1, net.cfg.d_z, generator=gen)
    with torch.no_grad():
        x_s = torch.from_numpy(enc.scene_feature.astype(np.float32))[None]
        V_s = torch.from_numpy(enc.scene_bps.astype(np.float32))[None]
        x_b, verts = net.generate(x_s, V_s, z)
    return GeneratedSample(index, int(seed), tr, enc.scene_bps, x_b[0].double().numpy(),
                           verts[0].double().numpy())


def refine(sample: GeneratedSample, source: SceneSource, cfg: OptimConfig) -> OptimResult:
    if cfg.scene_terms and source.sdf is None:
        raise ValueError("advoptim needs a scene SDF")
    return fit_body(sample.raw_vertices, sample.x_b, sample.scene_bps, sample.transform, cfg,
                    sdf=source.sdf, scene_index=source.index if cfg.scene_terms else None)


def finish(sample: GeneratedSample, source: SceneSource, variant: str,
           result: Optional[OptimResult] = None) -> GeneratedSample:
    """Attach final vertices, losses and scores for ``variant``."""
    out = GeneratedSample(sample.index, sample.seed, sample.transform, sample.scene_bps, sample.x_b,
                          sample.raw_vertices, variant)
    if variant == RAW:
        out.vertices_world = sample.raw_world
    else:
        out.params = result.params
        out.vertices_world = get_body_model().vertices(result.params)
        out.losses = dict(result.final_losses)
        out.trajectory = list(result.trajectory)
    if source.sdf is not None:
        out.scores = {"non_collision": non_collision_score(out.vertices_world, source.sdf),
                      "contact": contact_score(out.vertices_world, source.sdf)}
    return out


def generate(net: PlaceNet, source: SceneSource, count: int, seed: int, variant: str = RAW,
             optim: Optional[OptimConfig] = None, basis: Optional[BasisPointSet] = None,
             edge: float = 2.0, wall_spacing: float = 0.25, margin: float = 0.5) -> List[GeneratedSample]:
    """``count`` samples with per-sample seed ``seed + i``; failed samples are logged and skipped."""
    if variant not in GEN_VARIANTS:
        raise ValueError(f"variant must be one of {GEN_VARIANTS}")
    basis = basis or make_basis(net.cfg.n_basis, net.cfg.basis_seed)
    if variant != RAW:
        optim = optim or OptimConfig(variant=variant)
        if optim.variant != variant:
            raise ValueError("optim config variant disagrees with the requested variant")
    out = []
    for i in range(count):
        try:
            s = sample_one(net, source, basis, i, seed + i, edge, wall_spacing, margin)
            res = refine(s, source, optim) if variant != RAW else None
            out.append(finish(s, source, variant, res))
        except (CageFitError, EmptyRegionError, FitDivergedError, SdfDomainError) as exc:
            log.warning("sample %d (seed %d) failed: %s", i, seed + i, exc)
    return out
