"""Exact nearest-neighbour queries and signed distance fields (analytic and gridded)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree


class EmptyIndexError(ValueError):
    pass


class SdfDomainError(ValueError):
    """Query point outside a grid field's bounds."""


def point_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance with a fixed summation order (x, then y, then z).

    Every exact-NN path in the package goes through this so that results can be
    compared bit-for-bit against a scalar double loop.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def brute_force_nearest(points: np.ndarray, queries: np.ndarray, chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyIndexError("nearest-neighbour search over an empty point set")
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        d = point_distances(queries[s:s + chunk, None, :], points[None, :, :])
        i = np.argmin(d, axis=1)  # first occurrence == lowest index on ties
        idx[s:s + chunk] = i
        dist[s:s + chunk] = d[np.arange(len(i)), i]
    return idx, dist


class PointIndex:
    """k-d tree over 3D points with exact, lowest-index-tie-broken answers.

    The tree proposes a few candidates; candidates are re-ranked with
    :func:`point_distances`, and rows whose tie cannot be ruled out fall back
    to a radius query.
    """

    _K = 4

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise EmptyIndexError("cannot build an index over zero points")
        self.tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def nearest(self, query) -> Tuple[int, float]:
        i, d = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(i[0]), float(d[0])

    def query(self, queries) -> Tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(self._K, len(self.points))
        kd_dist, cand = self.tree.query(q, k=list(range(1, k + 1)))
        exact = point_distances(q[:, None, :], self.points[cand])
        best = exact.min(axis=1)
        # lowest index among exact minima
        masked = np.where(exact == best[:, None], cand, np.iinfo(np.int64).max)
        idx = masked.min(axis=1)
        if k < len(self.points):
            unsure = np.nonzero(kd_dist[:, -1] <= best * (1 + 1e-9) + 1e-300)[0]
            for r in unsure:
                near = self.tree.query_ball_point(q[r], best[r] * (1 + 1e-9) + 1e-12)
                near = np.sort(np.asarray(near, dtype=np.int64))
                d = point_distances(q[r], self.points[near])
                j = int(np.argmin(d))
                idx[r], best[r] = near[j], d[j]
        return idx.astype(np.int64), best


# ---------------------------------------------------------------------------
# signed distance fields

@dataclass(frozen=True)
class AnalyticSdf:
    """Union of a half-space floor and yaw-rotated boxes.

    ``boxes`` rows are ``(cx, cy, cz, hx, hy, hz, yaw)``. Ties between
    primitives resolve to the first one in order: floor, then boxes.
    """

    boxes: np.ndarray
    floor_height: float | None = 0.0

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        if np.any(b[:, 3:6] <= 0):
            raise ValueError("box half-extents must be positive")
        object.__setattr__(self, "boxes", b)

    def rotated(self, yaw: float) -> "AnalyticSdf":
        """The same geometry rotated about world z."""
        from .mesh import rotate_z
        b = self.boxes.copy()
        b[:, 0:3] = rotate_z(b[:, 0:3], yaw)
        b[:, 6] += yaw
        return AnalyticSdf(b, self.floor_height)

    def _primitive_values(self, p: np.ndarray):
        cols = []
        if self.floor_height is not None:
            cols.append(p[:, 2] - self.floor_height)
        locals_, qs = [], []
        for cx, cy, cz, hx, hy, hz, yaw in self.boxes:
            c, s = np.cos(yaw), np.sin(yaw)
            dx, dy, dz = p[:, 0] - cx, p[:, 1] - cy, p[:, 2] - cz
            loc = np.stack([c * dx + s * dy, -s * dx + c * dy, dz], axis=1)
            q = np.abs(loc) - np.array([hx, hy, hz])
            qp = np.maximum(q, 0.0)
            outside = np.sqrt(qp[:, 0] ** 2 + qp[:, 1] ** 2 + qp[:, 2] ** 2)
            inside = np.minimum(q.max(axis=1), 0.0)
            cols.append(outside + inside)
            locals_.append(loc)
            qs.append(q)
        return np.stack(cols, axis=1), locals_, qs

    def eval(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        vals, _, _ = self._primitive_values(p)
        return vals.min(axis=1)

    def eval_grad(self, points) -> Tuple[np.ndarray, np.ndarray]:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        vals, locals_, qs = self._primitive_values(p)
        which = np.argmin(vals, axis=1)
        grad = np.zeros_like(p)
        off = 0
        if self.floor_height is not None:
            grad[which == 0, 2] = 1.0
            off = 1
        for b, (loc, q) in enumerate(zip(locals_, qs)):
            sel = which == b + off
            if not sel.any():
                continue
            loc, q = loc[sel], q[sel]
            sgn = np.where(loc >= 0, 1.0, -1.0)
            qp = np.maximum(q, 0.0)
            norm = np.sqrt((qp ** 2).sum(axis=1))
            g = np.zeros_like(loc)
            out = norm > 0
            g[out] = sgn[out] * qp[out] / norm[out, None]
            ins = ~out
            axis = np.argmax(q[ins], axis=1)
            g[ins, axis] = sgn[ins, axis]
            yaw = self.boxes[b, 6]
            c, s = np.cos(yaw), np.sin(yaw)
            grad[sel] = np.stack([c * g[:, 0] - s * g[:, 1], s * g[:, 0] + c * g[:, 1], g[:, 2]], axis=1)
        return vals.min(axis=1), grad

    def grad(self, points) -> np.ndarray:
        return self.eval_grad(points)[1]


_GRID_MAGIC = b"PSDF"
_GRID_VERSION = 1


@dataclass(frozen=True)
class GridSdf:
    """Trilinearly interpolated lattice of signed distances; ``values[i, j, k]``."""

    origin: np.ndarray
    cell_size: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "cell_size", np.broadcast_to(
            np.asarray(self.cell_size, dtype=np.float64), (3,)).copy())
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if np.any(self.cell_size <= 0):
            raise ValueError("cell size must be positive")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[a] + np.arange(n) * self.cell_size[a] for a, n in enumerate(self.resolution)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1)

    def _locate(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        t = (p - self.origin) / self.cell_size
        r = np.rint(t)
        t = np.where(np.abs(t - r) < 1e-9, r, t)  # snap lattice nodes
        hi = np.array(self.resolution, dtype=np.float64) - 1
        if np.any(t < 0) or np.any(t > hi):
            bad = p[np.any((t < 0) | (t > hi), axis=1)][0]
            raise SdfDomainError(f"point {bad.tolist()} outside grid bounds")
        i0 = np.minimum(np.floor(t).astype(np.int64), np.array(self.resolution) - 2)
        return i0, t - i0

    def eval_grad(self, points) -> Tuple[np.ndarray, np.ndarray]:
        i0, f = self._locate(points)
        v = self.values
        c = {}
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[dx, dy, dz] = v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
        # lerp along x, then y, then z
        c00 = gx * c[0, 0, 0] + fx * c[1, 0, 0]
        c10 = gx * c[0, 1, 0] + fx * c[1, 1, 0]
        c01 = gx * c[0, 0, 1] + fx * c[1, 0, 1]
        c11 = gx * c[0, 1, 1] + fx * c[1, 1, 1]
        c0 = gy * c00 + fy * c10
        c1 = gy * c01 + fy * c11
        val = gz * c0 + fz * c1
        dcx = lambda y0, z0: c[1, y0, z0] - c[0, y0, z0]
        d_x = gz * (gy * dcx(0, 0) + fy * dcx(1, 0)) + fz * (gy * dcx(0, 1) + fy * dcx(1, 1))
        d_y = gz * (c10 - c00) + fz * (c11 - c01)
        d_z = c1 - c0
        grad = np.stack([d_x, d_y, d_z], axis=1) / self.cell_size
        return val, grad

    def eval(self, points) -> np.ndarray:
        return self.eval_grad(points)[0]

    def grad(self, points) -> np.ndarray:
        return self.eval_grad(points)[1]

    def save(self, path: Union[str, Path]) -> None:
        nx, ny, nz = self.resolution
        with open(path, "wb") as fh:
            fh.write(_GRID_MAGIC)
            fh.write(struct.pack("<I3d3d3I", _GRID_VERSION, *self.origin, *self.cell_size, nx, ny, nz))
            fh.write(self.values.astype("<f4").tobytes(order="F"))  # x fastest

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GridSdf":
        data = Path(path).read_bytes()
        if data[:4] != _GRID_MAGIC:
            raise ValueError(f"{path}: not a grid SDF file")
        head = struct.calcsize("<I3d3d3I")
        version, *rest = struct.unpack_from("<I3d3d3I", data, 4)
        if version != _GRID_VERSION:
            raise ValueError(f"{path}: unsupported grid SDF version {version}")
        origin, cell, res = rest[0:3], rest[3:6], rest[6:9]
        count = res[0] * res[1] * res[2]
        vals = np.frombuffer(data, dtype="<f4", count=count, offset=4 + head)
        return cls(origin, cell, vals.reshape(res, order="F").astype(np.float64))


SdfField = Union[AnalyticSdf, GridSdf]


def sdf_eval(field: SdfField, points) -> np.ndarray:
    return field.eval(points)


def sdf_grad(field: SdfField, points) -> np.ndarray:
    return field.grad(points)


def bake_grid(field: AnalyticSdf, bounds, resolution) -> GridSdf:
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 2):
        raise ValueError("grid resolution must be at least 2 per axis")
    if np.any(hi <= lo):
        raise ValueError("degenerate grid bounds")
    cell = (hi - lo) / (res - 1)
    grid = GridSdf(lo, cell, np.zeros(tuple(res)))
    nodes = grid.node_positions()
    vals = field.eval(nodes.reshape(-1, 3)).reshape(tuple(res))
    return GridSdf(lo, cell, vals)
