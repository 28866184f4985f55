"""Two-stage basis point set encoding of a local scene and a body."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .mesh import CageTransform
from .spatial import PointIndex


@dataclass(frozen=True)
class BasisPointSet:
    points: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return len(self.points)


def make_basis(n: int, seed: int) -> BasisPointSet:
    """Uniform samples inside the unit ball, by rejection from the cube [-1, 1]^3."""
    if n < 1:
        raise ValueError("basis size must be at least 1")
    rng = np.random.default_rng(seed)
    out = np.empty((0, 3))
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(max(2 * (n - len(out)), 64), 3))
        norm2 = (cand * cand).sum(axis=1)
        out = np.concatenate([out, cand[norm2 < 1.0]])
    return BasisPointSet(out[:n].copy(), int(seed))


@dataclass(frozen=True)
class SceneEncoding:
    """Stage-1 output. ``scene_bps`` is in the cage frame, ``scene_feature`` in sphere units."""

    scene_bps: np.ndarray
    scene_feature: np.ndarray
    source_flags: np.ndarray
    transform: Optional[CageTransform] = None

    @property
    def n(self) -> int:
        return len(self.scene_feature)


def encode_scene(basis: BasisPointSet, cage_points: np.ndarray, transform: Optional[CageTransform] = None,
                 cage_flags: Optional[np.ndarray] = None) -> SceneEncoding:
    """Select, for each basis point, its nearest local-scene point.

    ``cage_points`` are the normalized scene vertices and cage wall samples in
    the cage frame; ``transform`` (if given) supplies the augmentation that maps
    them into the sphere frame where the basis lives.
    """
    q = np.asarray(cage_points, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0:
        raise ValueError("cannot encode an empty scene")
    u = transform.cage_to_sphere(q) if transform is not None else q
    idx, dist = PointIndex(u).query(basis.points)
    flags = np.zeros(len(q), bool) if cage_flags is None else np.asarray(cage_flags, bool)
    return SceneEncoding(q[idx], dist, flags[idx], transform)


def encode_body(scene_enc: SceneEncoding, body_vertices: np.ndarray) -> np.ndarray:
    """Distance from every scene basis point to its nearest body vertex."""
    v = np.asarray(body_vertices, dtype=np.float64).reshape(-1, 3)
    if len(v) == 0:
        raise ValueError("cannot encode an empty body")
    _, dist = PointIndex(v).query(scene_enc.scene_bps)
    return dist


def nearest_body_vertex(scene_bps: np.ndarray, body_vertices: np.ndarray) -> np.ndarray:
    return PointIndex(body_vertices).query(scene_bps)[0]


def feature_from_body(body_vertices: torch.Tensor, scene_bps) -> torch.Tensor:
    """Differentiable body feature.

    The nearest vertex is chosen without gradient (lowest index on ties); the
    distance to it is then recomputed in torch so gradients flow to that vertex.
    """
    if body_vertices.shape[0] == 0:
        raise ValueError("cannot encode an empty body")
    bps = torch.as_tensor(np.asarray(scene_bps), dtype=body_vertices.dtype)
    idx = nearest_body_vertex(bps.detach().numpy(), body_vertices.detach().numpy())
    diff = bps - body_vertices[torch.as_tensor(idx)]
    return torch.linalg.vector_norm(diff, dim=-1)


def save_feature(values, path: Union[str, Path]) -> None:
    v = np.asarray(values, dtype="<f4").reshape(-1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(v)))
        fh.write(v.tobytes())


def load_feature(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 4 * n:
        raise ValueError(f"{path}: feature file length does not match its header")
    return np.frombuffer(data, dtype="<f4", count=n, offset=4).astype(np.float64)
