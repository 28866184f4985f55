"""Synthetic rooms, ground-truth body placements, augmented training samples, dataset files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .body import BodyModel, BodyParams, N_PARAMS, get_body_model, sample_pose
from .bps import BasisPointSet, SceneEncoding, encode_body, encode_scene, make_basis
from .mesh import CageTransform, LocalScene, TriMesh, crop_local_scene, rotate_z
from .spatial import AnalyticSdf

CATEGORIES = ("standing", "sitting", "lying")
MESH_PITCH = 0.1


class SceneGenerationError(RuntimeError):
    pass


class PlacementError(RuntimeError):
    pass


class CageFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Seat:
    box_index: int
    center: np.ndarray
    half: np.ndarray

    @property
    def height(self) -> float:
        return float(self.center[2] + self.half[2])


@dataclass(frozen=True)
class SynthScene:
    mesh: TriMesh
    sdf: AnalyticSdf
    seats: Tuple[Seat, ...]
    room_extent: Tuple[float, float]
    seed: int
    furniture_count: int

    @property
    def floor_region(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros(2), np.array(self.room_extent)


def _grid_patch(origin, du, dv, nu, nv):
    """Vertices and faces of a regular quad grid spanned by du, dv."""
    u = np.linspace(0.0, 1.0, nu)
    v = np.linspace(0.0, 1.0, nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts = origin + uu.reshape(-1, 1) * du + vv.reshape(-1, 1) * dv
    idx = np.arange(nu * nv).reshape(nu, nv)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return pts, faces


def _box_surface(center, half):
    """Top and four side faces of a box resting on the floor."""
    c, h = np.asarray(center, float), np.asarray(half, float)
    lo, hi = c - h, c + h
    size = hi - lo
    n = [int(math.ceil(s / MESH_PITCH)) + 1 for s in size]
    ex, ey, ez = np.array([size[0], 0, 0]), np.array([0, size[1], 0]), np.array([0, 0, size[2]])
    patches = [
        (np.array([lo[0], lo[1], hi[2]]), ex, ey, n[0], n[1]),
        (np.array([lo[0], lo[1], lo[2]]), ex, ez, n[0], n[2]),
        (np.array([lo[0], hi[1], lo[2]]), ex, ez, n[0], n[2]),
        (np.array([lo[0], lo[1], lo[2]]), ey, ez, n[1], n[2]),
        (np.array([hi[0], lo[1], lo[2]]), ey, ez, n[1], n[2]),
    ]
    return [_grid_patch(*p) for p in patches]


def generate_scene(seed: int, room_extent=(5.0, 5.0), furniture_count: int = 2,
                   seat_first: bool = True, clearance: float = 0.8, max_tries: int = 500) -> SynthScene:
    """A floor plus non-overlapping tables and seats, deterministic per seed."""
    w, d = (float(x) for x in np.broadcast_to(np.asarray(room_extent, float), (2,)))
    if w < 3.0 or d < 3.0:
        raise ValueError("room extent must be at least 3 m per side")
    rng = np.random.default_rng(seed)
    boxes = []
    kinds = []
    for i in range(furniture_count):
        seat = (i == 0 and seat_first) or rng.random() < 0.5
        if seat:
            side = rng.uniform(0.4, 0.5)
            half = np.array([side / 2, side / 2, rng.uniform(0.4, 0.5) / 2])
        else:
            half = np.array([rng.uniform(0.8, 1.4) / 2, rng.uniform(0.6, 0.9) / 2, rng.uniform(0.7, 0.8) / 2])
        for _ in range(max_tries):
            cx = rng.uniform(0.3 + half[0], w - 0.3 - half[0])
            cy = rng.uniform(0.3 + half[1], d - 0.3 - half[1])
            ok = all(abs(cx - b[0]) >= half[0] + b[3] + clearance or abs(cy - b[1]) >= half[1] + b[4] + clearance
                     for b in boxes)
            if ok:
                break
        else:
            raise SceneGenerationError(f"could not place furniture item {i} without overlap (seed {seed})")
        boxes.append([cx, cy, half[2], half[0], half[1], half[2], 0.0])
        kinds.append("seat" if seat else "table")

    nx, ny = int(round(w / MESH_PITCH)) + 1, int(round(d / MESH_PITCH)) + 1
    parts = [_grid_patch(np.zeros(3), np.array([w, 0, 0]), np.array([0, d, 0]), nx, ny)]
    for b in boxes:
        parts += _box_surface(b[0:3], b[3:6])
    verts, faces, base = [], [], 0
    for p, f in parts:
        verts.append(p)
        faces.append(f + base)
        base += len(p)
    mesh = TriMesh(np.concatenate(verts), np.concatenate(faces))
    boxes = np.array(boxes).reshape(-1, 7)
    seats = tuple(Seat(i, boxes[i, 0:3].copy(), boxes[i, 3:6].copy())
                  for i, k in enumerate(kinds) if k == "seat")
    return SynthScene(mesh, AnalyticSdf(boxes, 0.0), seats, (w, d), int(seed), furniture_count)


# ---------------------------------------------------------------------------
# placement

def _collision_loss(sdf_vals: np.ndarray) -> float:
    return float(np.abs(np.minimum(sdf_vals, 0.0)).mean())


def place_body(scene: SynthScene, category: str, seed: int, model: Optional[BodyModel] = None,
               max_tries: int = 60) -> BodyParams:
    """Place a body of ``category`` in contact with a compatible support and free of collision."""
    model = model or get_body_model()
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if category == "sitting" and not scene.seats:
        raise PlacementError("no seat available for a sitting body")
    rng = np.random.default_rng(seed)
    w, d = scene.room_extent
    sid = model.segment_index
    seat_part = np.isin(model.segment_ids, [sid["pelvis"], sid["thigh_r"], sid["thigh_l"]])
    for _ in range(max_tries):
        pose_seed = int(rng.integers(2**31))
        if category == "sitting":
            seat = scene.seats[int(rng.integers(len(scene.seats)))]
            p = sample_pose("sitting", pose_seed, model, seat_height=seat.height)
            yaw = float(rng.integers(4)) * math.pi / 2 + rng.normal(0.0, 0.1)
            facing = np.array([-math.sin(yaw), math.cos(yaw)])
            xy = seat.center[:2] - 0.06 * facing
        else:
            p = sample_pose(category, pose_seed, model)
            yaw = rng.uniform(0.0, 2 * math.pi)
            m = 0.9
            xy = np.array([rng.uniform(m, w - m), rng.uniform(m, d - m)])
        p = p.replace(translation=np.array([xy[0], xy[1], p.translation[2]]), yaw=yaw)
        v = model.vertices(p)
        sd = scene.sdf.eval(v)
        if sd.min() < -1e-3 or _collision_loss(sd) >= 1e-4:
            continue
        if category == "standing":
            support = sd[model.feet_mask].min()
        elif category == "sitting":
            support = sd[seat_part].min()
        else:
            support = sd.min()
        if 0.0 <= support <= 0.02:
            return p
    raise PlacementError(f"no free region for a {category} body after {max_tries} attempts")


# ---------------------------------------------------------------------------
# training samples

@dataclass(frozen=True)
class TrainSample:
    x_s: np.ndarray           # (N,) sphere units
    V_s: np.ndarray           # (N, 3) cage frame
    x_b: np.ndarray           # (N,)
    V_b: np.ndarray           # (V, 3) cage frame
    transform: CageTransform
    scene_seed: int
    params: BodyParams
    category: str = "standing"
    source_flags: Optional[np.ndarray] = None


def extract_sample(scene: SynthScene, params: BodyParams, aug_seed: int, basis: BasisPointSet,
                   cage_edge: float = 2.0, wall_spacing: float = 0.25, shift_range: float = 0.05,
                   augment: bool = True, category: str = "standing", model: Optional[BodyModel] = None,
                   max_tries: int = 50) -> TrainSample:
    model = model or get_body_model()
    rng = np.random.default_rng(aug_seed)
    body_w = model.vertices(params)
    half = cage_edge / 2.0
    yaw = rng.uniform(0.0, 2 * math.pi) if augment else 0.0
    rot_body = rotate_z(body_w, yaw)
    center_xy = (rot_body[:, :2].min(0) + rot_body[:, :2].max(0)) / 2
    for _ in range(max_tries):
        delta = rng.uniform(-half / 3, half / 3, size=2) if augment else np.zeros(2)
        c_rot = np.array([center_xy[0] + delta[0], center_xy[1] + delta[1], 1.0])
        if np.all(np.abs(rot_body - c_rot) <= half):
            break
        if not augment:
            raise CageFitError("body does not fit inside the cage")
    else:
        raise CageFitError(f"body did not fit inside the cage after {max_tries} shifts")
    c_world = rotate_z(c_rot, -yaw)
    local = crop_local_scene(scene.mesh, c_world, cage_edge, wall_spacing, world_yaw=yaw)
    if augment:
        rot = rng.uniform(0.0, 2 * math.pi)
        shift = rng.uniform(-shift_range, shift_range, size=3)
    else:
        rot, shift = 0.0, np.zeros(3)
    tr = local.transform.with_augmentation(rot, shift)
    enc = encode_scene(basis, tr.world_to_cage(local.points), tr, local.cage_flags)
    V_b = tr.world_to_cage(body_w)
    x_b = encode_body(enc, V_b)
    return TrainSample(enc.scene_feature, enc.scene_bps, x_b, V_b, tr, scene.seed, params,
                       category, enc.source_flags)


# ---------------------------------------------------------------------------
# dataset container

_DS_MAGIC = b"PSDS"
_DS_VERSION = 1
_DS_HEADER = "<4sIIIIQdd"


def _record_dtype(n: int, v: int) -> np.dtype:
    return np.dtype([
        ("split", "u1"), ("category", "u1"), ("scene_seed", "<u8"),
        ("room_extent", "<f8", 2), ("furniture_count", "<u4"),
        ("transform", "<f8", 10), ("params", "<f8", N_PARAMS),
        ("V_s", "<f4", (n, 3)), ("x_s", "<f4", n), ("V_b", "<f4", (v, 3)), ("x_b", "<f4", n),
    ])


@dataclass
class Dataset:
    records: np.ndarray
    basis_seed: int
    cage_edge: float = 2.0
    wall_spacing: float = 0.25

    @property
    def n(self) -> int:
        return self.records["x_s"].shape[1]

    @property
    def n_vertices(self) -> int:
        return self.records["V_b"].shape[1]

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> "Dataset":
        code = {"train": 0, "test": 1}[name]
        return Dataset(self.records[self.records["split"] == code], self.basis_seed, self.cage_edge,
                       self.wall_spacing)

    def transform(self, i: int) -> CageTransform:
        return CageTransform.from_array(self.records["transform"][i])

    def scene(self, i: int) -> SynthScene:
        r = self.records[i]
        return cached_scene(int(r["scene_seed"]), tuple(float(x) for x in r["room_extent"]),
                            int(r["furniture_count"]))

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(struct.pack(_DS_HEADER, _DS_MAGIC, _DS_VERSION, self.n, self.n_vertices, len(self),
                                 self.basis_seed, self.cage_edge, self.wall_spacing))
            fh.write(self.records.tobytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        data = Path(path).read_bytes()
        head = struct.calcsize(_DS_HEADER)
        magic, version, n, v, count, basis_seed, edge, spacing = struct.unpack_from(_DS_HEADER, data, 0)
        if magic != _DS_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        if version != _DS_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        dt = _record_dtype(n, v)
        if len(data) != head + count * dt.itemsize:
            raise ValueError(f"{path}: truncated dataset ({len(data)} bytes)")
        recs = np.frombuffer(data, dtype=dt, count=count, offset=head).copy()
        return cls(recs, int(basis_seed), float(edge), float(spacing))


@lru_cache(maxsize=256)
def cached_scene(seed: int, room_extent: Tuple[float, float], furniture_count: int) -> SynthScene:
    return generate_scene(seed, room_extent, furniture_count)


@dataclass
class DataConfig:
    seed: int = 0
    n_basis: int = 1024
    basis_seed: int = 7
    placements: int = 500
    augmentations: int = 4
    placements_per_scene: int = 10
    test_fraction: float = 0.1
    room_min: float = 4.0
    room_max: float = 6.0
    furniture_min: int = 1
    furniture_max: int = 4
    cage_edge: float = 2.0
    wall_spacing: float = 0.25
    shift_range: float = 0.05
    category_probs: Tuple[float, float, float] = (0.45, 0.35, 0.2)


def scene_spec(scene_seed: int, cfg: DataConfig) -> Tuple[Tuple[float, float], int]:
    rng = np.random.default_rng([scene_seed, 1])
    extent = (round(float(rng.uniform(cfg.room_min, cfg.room_max)), 1),
              round(float(rng.uniform(cfg.room_min, cfg.room_max)), 1))
    return extent, int(rng.integers(cfg.furniture_min, cfg.furniture_max + 1))


def scene_for_seed(scene_seed: int, cfg: DataConfig) -> Tuple[Tuple[float, float], int, SynthScene]:
    """Scene for a seed; drops furniture items until the layout fits the room."""
    extent, nfurn = scene_spec(scene_seed, cfg)
    while True:
        try:
            return extent, nfurn, cached_scene(scene_seed, extent, nfurn)
        except SceneGenerationError:
            if nfurn <= 1:
                raise
            nfurn -= 1


def scene_seeds(cfg: DataConfig) -> Tuple[List[int], List[int]]:
    n_scenes = int(math.ceil(cfg.placements / cfg.placements_per_scene))
    n_test = max(1, int(round(n_scenes * cfg.test_fraction))) if cfg.test_fraction > 0 else 0
    rng = np.random.default_rng([cfg.seed, 0])
    seeds = [int(s) for s in rng.choice(2**31 - 1, size=n_scenes, replace=False)]
    return seeds[: n_scenes - n_test], seeds[n_scenes - n_test:]


def build_dataset(cfg: DataConfig, model: Optional[BodyModel] = None) -> Dataset:
    model = model or get_body_model()
    basis = make_basis(cfg.n_basis, cfg.basis_seed)
    train_seeds, test_seeds = scene_seeds(cfg)
    dt = _record_dtype(cfg.n_basis, model.n_vertices)
    rows = []
    remaining = cfg.placements
    for split, seeds in ((0, train_seeds), (1, test_seeds)):
        for si, sseed in enumerate(seeds):
            extent, nfurn, scene = scene_for_seed(sseed, cfg)
            count = min(cfg.placements_per_scene, remaining)
            remaining -= count
            for pi in range(count):
                rng = np.random.default_rng([cfg.seed, sseed, pi])
                cat = CATEGORIES[int(rng.choice(3, p=np.asarray(cfg.category_probs) / sum(cfg.category_probs)))]
                if cat == "sitting" and not scene.seats:
                    cat = "standing"
                params = None
                for attempt in range(5):
                    try:
                        params = place_body(scene, cat, int(rng.integers(2**31)), model)
                        break
                    except PlacementError:
                        continue
                if params is None:
                    raise PlacementError(f"scene {sseed}: could not place a {cat} body")
                for a in range(cfg.augmentations):
                    sample = None
                    for attempt in range(5):
                        try:
                            sample = extract_sample(scene, params, int(rng.integers(2**31)), basis,
                                                    cfg.cage_edge, cfg.wall_spacing, cfg.shift_range,
                                                    category=cat, model=model)
                            break
                        except CageFitError:
                            continue
                    if sample is None:
                        raise CageFitError(f"scene {sseed}: body never fit inside the cage")
                    rec = np.zeros((), dtype=dt)
                    rec["split"] = split
                    rec["category"] = CATEGORIES.index(cat)
                    rec["scene_seed"] = sseed
                    rec["room_extent"] = extent
                    rec["furniture_count"] = nfurn
                    rec["transform"] = sample.transform.to_array()
                    rec["params"] = params.to_vector()
                    rec["V_s"] = sample.V_s
                    rec["x_s"] = sample.x_s
                    rec["V_b"] = sample.V_b
                    rec["x_b"] = sample.x_b
                    rows.append(rec)
    return Dataset(np.array(rows, dtype=dt), cfg.basis_seed, cfg.cage_edge, cfg.wall_spacing)
