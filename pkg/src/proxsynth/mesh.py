"""Triangle meshes, OBJ/PLY I/O, the virtual cage and its unit-sphere transform."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""


class MeshValidationError(ValueError):
    """Mesh data violates an index or finiteness invariant."""


class EmptyRegionError(ValueError):
    """A cage crop selected no scene vertices."""


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    quality: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshValidationError(
                f"face index out of range (vertex count {len(v)}, max index {f.max()})")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.quality is not None:
            q = np.asarray(self.quality, dtype=np.float64).reshape(-1)
            if len(q) != len(v):
                raise MeshValidationError("quality channel length differs from vertex count")
            object.__setattr__(self, "quality", q)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces, self.quality)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points about the z axis; z is passed through untouched."""
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    out = p.copy()
    out[..., 0] = c * p[..., 0] - s * p[..., 1]
    out[..., 1] = s * p[..., 0] + c * p[..., 1]
    return out


# ---------------------------------------------------------------------------
# file I/O

def load_mesh(path: Union[str, Path], format: Optional[str] = None) -> TriMesh:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        return _load_obj(path)
    if fmt == "ply":
        return _load_ply(path)
    raise MeshFormatError(f"{path}: unsupported mesh format {fmt!r}")


def save_mesh(mesh: TriMesh, path: Union[str, Path], format: Optional[str] = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "obj":
        _save_obj(mesh, path)
    elif fmt == "ply":
        _save_ply(mesh, path)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh format {fmt!r}")


def _load_obj(path: Path) -> TriMesh:
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 indices")
                    # fan-triangulate polygons
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from None
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def _save_obj(mesh: TriMesh, path: Path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _save_ply(mesh: TriMesh, path: Path) -> None:
    has_q = mesh.quality is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_q:
        header.append("property float quality")
    header += [f"element face {len(mesh.faces)}",
               "property list uchar int vertex_indices", "end_header"]
    cols = [mesh.vertices.astype("<f4")]
    if has_q:
        cols.append(mesh.quality.astype("<f4")[:, None])
    vdata = np.ascontiguousarray(np.concatenate(cols, axis=1), dtype="<f4")
    fdata = np.empty(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    fdata["n"] = 3
    fdata["idx"] = mesh.faces
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(vdata.tobytes())
        fh.write(fdata.tobytes())


def _load_ply(path: Path) -> TriMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError(f"{path}:1: missing 'ply' magic")
        elements = []  # [name, count, [(prop, dtype) | (prop, count_dtype, item_dtype)]]
        fmt = None
        lineno = 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise MeshFormatError(f"{path}:{lineno}: unexpected end of header")
            tok = raw.decode("ascii", errors="replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            try:
                if tok[0] == "format":
                    fmt = tok[1]
                elif tok[0] == "element":
                    elements.append([tok[1], int(tok[2]), []])
                elif tok[0] == "property":
                    if tok[1] == "list":
                        elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                    else:
                        elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
                else:
                    raise ValueError(f"unknown header keyword {tok[0]!r}")
            except (IndexError, KeyError, ValueError) as exc:
                raise MeshFormatError(f"{path}:{lineno}: bad header line ({exc})") from None
        if fmt != "binary_little_endian":
            raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
        body = fh.read()

    verts = np.zeros((0, 3))
    quality = None
    faces = np.zeros((0, 3), dtype=np.int64)
    offset = 0
    for name, count, props in elements:
        if all(len(p) == 2 for p in props):
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            nbytes = dt.itemsize * count
            if offset + nbytes > len(body):
                raise MeshFormatError(f"{path}: truncated '{name}' element data")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += nbytes
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
                if "quality" in arr.dtype.names:
                    quality = arr["quality"].astype(np.float64)
        elif len(props) == 1 and len(props[0]) == 3:
            _, cdt, idt = props[0]
            csize, isize = np.dtype(cdt).itemsize, np.dtype(idt).itemsize
            rows = []
            for _ in range(count):
                if offset + csize > len(body):
                    raise MeshFormatError(f"{path}: truncated '{name}' element data")
                n = int(np.frombuffer(body, dtype="<" + cdt, count=1, offset=offset)[0])
                offset += csize
                if offset + n * isize > len(body):
                    raise MeshFormatError(f"{path}: truncated '{name}' element data")
                idx = np.frombuffer(body, dtype="<" + idt, count=n, offset=offset)
                offset += n * isize
                for k in range(1, n - 1):
                    rows.append((idx[0], idx[k], idx[k + 1]))
            if name == "face":
                faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
        else:
            raise MeshFormatError(f"{path}: unsupported property layout in element '{name}'")
    return TriMesh(verts, faces, quality)


# ---------------------------------------------------------------------------
# virtual cage

@dataclass(frozen=True)
class CageTransform:
    """Maps world points into the cage frame and the augmented unit-sphere frame.

    cage frame:   q = scale * Rz(world_yaw) (p - cage_center)
    sphere frame: u = Rz(rotation) q + shift

    ``world_yaw`` is the data-augmentation rotation of the (scene, body) pair
    about world z; it is zero at inference time.
    """

    cage_center: np.ndarray
    cage_edge: float
    scale: float
    rotation: float = 0.0
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    world_yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cage_center", np.asarray(self.cage_center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise ValueError("cage scale must be positive")

    @classmethod
    def for_cage(cls, center, edge: float, **kw) -> "CageTransform":
        return cls(center, edge, 2.0 / (edge * math.sqrt(3.0)), **kw)

    def world_to_cage(self, p: np.ndarray) -> np.ndarray:
        return self.scale * rotate_z(np.asarray(p, dtype=np.float64) - self.cage_center, self.world_yaw)

    def cage_to_world(self, q: np.ndarray) -> np.ndarray:
        return rotate_z(np.asarray(q, dtype=np.float64) / self.scale, -self.world_yaw) + self.cage_center

    def cage_to_sphere(self, q: np.ndarray) -> np.ndarray:
        return rotate_z(q, self.rotation) + self.shift

    def sphere_to_cage(self, u: np.ndarray) -> np.ndarray:
        return rotate_z(np.asarray(u, dtype=np.float64) - self.shift, -self.rotation)

    def world_to_sphere(self, p: np.ndarray) -> np.ndarray:
        return self.cage_to_sphere(self.world_to_cage(p))

    def sphere_to_world(self, u: np.ndarray) -> np.ndarray:
        return self.cage_to_world(self.sphere_to_cage(u))

    def with_augmentation(self, rotation: float, shift) -> "CageTransform":
        return CageTransform(self.cage_center, self.cage_edge, self.scale, rotation, shift, self.world_yaw)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.cage_center, [self.cage_edge, self.scale, self.rotation],
                               self.shift, [self.world_yaw]])

    @classmethod
    def from_array(cls, a) -> "CageTransform":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0:3], float(a[3]), float(a[4]), float(a[5]), a[6:9], float(a[9]))


@dataclass(frozen=True)
class LocalScene:
    cropped_mesh: TriMesh
    cage_points: np.ndarray
    transform: CageTransform

    @property
    def points(self) -> np.ndarray:
        """Scene vertices followed by cage points, world frame."""
        return np.concatenate([self.cropped_mesh.vertices, self.cage_points], axis=0)

    @property
    def cage_flags(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.cropped_mesh.n_vertices, bool),
                               np.ones(len(self.cage_points), bool)])


def cage_wall_points(edge: float, spacing: float) -> np.ndarray:
    """Regular grids on the top face and the four side faces of a centred cube.

    Shared edge points are repeated on each face that owns them.
    """
    h = edge / 2.0
    n = int(round(edge / spacing)) + 1
    t = np.linspace(-h, h, n)
    a, b = np.meshgrid(t, t, indexing="ij")
    a, b = a.ravel(), b.ravel()
    full = np.full_like(a, h)
    faces = [
        np.stack([a, b, full], 1),    # ceiling
        np.stack([full, a, b], 1),    # +x wall
        np.stack([-full, a, b], 1),   # -x wall
        np.stack([a, full, b], 1),    # +y wall
        np.stack([a, -full, b], 1),   # -y wall
    ]
    return np.concatenate(faces, axis=0)


def crop_local_scene(scene: TriMesh, cage_center, cage_edge: float, wall_spacing: float = 0.25,
                     world_yaw: float = 0.0) -> LocalScene:
    if not cage_edge > 0 or not wall_spacing > 0:
        raise ValueError("cage_edge and wall_spacing must be positive")
    center = np.asarray(cage_center, dtype=np.float64).reshape(3)
    h = cage_edge / 2.0
    local = rotate_z(scene.vertices - center, world_yaw)
    inside = np.all(np.abs(local) <= h, axis=1)
    if not inside.any():
        raise EmptyRegionError(f"no scene vertices inside cage centred at {center.tolist()}")
    remap = np.full(scene.n_vertices, -1, dtype=np.int64)
    remap[inside] = np.arange(int(inside.sum()))
    keep = np.all(inside[scene.faces], axis=1) if len(scene.faces) else np.zeros(0, bool)
    quality = scene.quality[inside] if scene.quality is not None else None
    cropped = TriMesh(scene.vertices[inside], remap[scene.faces[keep]], quality)
    walls = rotate_z(cage_wall_points(cage_edge, wall_spacing), -world_yaw) + center
    return LocalScene(cropped, walls, CageTransform.for_cage(center, cage_edge, world_yaw=world_yaw))


def to_unit_sphere(local: LocalScene, rotation: float = 0.0,
                   shift=(0.0, 0.0, 0.0)) -> Tuple[np.ndarray, CageTransform]:
    """Normalize scene vertices and cage points into the (optionally augmented) unit sphere."""
    tr = local.transform.with_augmentation(rotation, shift)
    return tr.world_to_sphere(local.points), tr
