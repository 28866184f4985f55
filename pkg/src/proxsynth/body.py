"""Procedural articulated body: capsule segments posed by forward kinematics.

Frame convention: z up, the body faces +y, its right side is +x. The root
(pelvis origin) sits at the midpoint of the hip joints. All joint angles at
zero give a T-pose.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .mesh import TriMesh, save_mesh

JOINT_NAMES = (
    "spine_flex", "spine_bend",
    "hip_flex_r", "hip_flex_l", "hip_abd_r", "hip_abd_l",
    "knee_r", "knee_l", "ankle_r", "ankle_l",
    "shoulder_abd_r", "shoulder_abd_l", "shoulder_flex_r", "shoulder_flex_l",
    "elbow_r", "elbow_l",
)
J = {name: i for i, name in enumerate(JOINT_NAMES)}
N_JOINTS = len(JOINT_NAMES)
N_PARAMS = 3 + 1 + N_JOINTS + 3

# radians; the spine range reaches -pi/2 so that lying poses are expressible
# with a yaw-only root
JOINT_LIMITS = np.array([
    [-1.75, 1.0], [-0.5, 0.5],
    [-0.6, 2.2], [-0.6, 2.2], [-0.3, 0.8], [-0.3, 0.8],
    [0.0, 2.5], [0.0, 2.5], [-0.9, 0.9], [-0.9, 0.9],
    [-1.2, 1.65], [-1.2, 1.65], [-0.8, 1.6], [-0.8, 1.6],
    [0.0, 2.6], [0.0, 2.6],
])
SCALE_LIMITS = np.array([0.75, 1.3])

# prior precision per joint: squared angles are measured in units of the joint's range
JOINT_PRIOR_WEIGHTS = 1.0 / (JOINT_LIMITS[:, 1] - JOINT_LIMITS[:, 0]) ** 2

# joints whose prior is weighted like a distal/hand prior
DISTAL_JOINTS = np.array([J["ankle_r"], J["ankle_l"], J["elbow_r"], J["elbow_l"]])
PROXIMAL_JOINTS = np.array([i for i in range(N_JOINTS) if i not in set(DISTAL_JOINTS.tolist())])


@dataclass(frozen=True)
class BodyParams:
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    joint_angles: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    shape_scale: np.ndarray = field(default_factory=lambda: np.ones(3))  # height, girth, limb

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "joint_angles", np.asarray(self.joint_angles, dtype=np.float64).reshape(N_JOINTS))
        object.__setattr__(self, "shape_scale", np.asarray(self.shape_scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "yaw", float(self.yaw))
        if np.any(self.shape_scale <= 0):
            raise ValueError("shape scales must be positive")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, [self.yaw], self.joint_angles, self.shape_scale])

    @classmethod
    def from_vector(cls, v) -> "BodyParams":
        v = np.asarray(v, dtype=np.float64).reshape(N_PARAMS)
        return cls(v[0:3], float(v[3]), v[4:4 + N_JOINTS], v[4 + N_JOINTS:])

    def replace(self, **kw) -> "BodyParams":
        d = dict(translation=self.translation, yaw=self.yaw,
                 joint_angles=self.joint_angles, shape_scale=self.shape_scale)
        d.update(kw)
        return BodyParams(**d)


@dataclass(frozen=True)
class BodyMesh:
    vertices: np.ndarray
    faces: np.ndarray
    feet_mask: np.ndarray
    clamped: bool = False

    def to_trimesh(self) -> TriMesh:
        return TriMesh(self.vertices, self.faces)


# ---------------------------------------------------------------------------
# template definition

@dataclass(frozen=True)
class _Segment:
    name: str
    parent: int
    offset_h: Tuple[float, float, float]      # joint position in parent frame, x height
    offset_hl: Tuple[float, float, float]     # ... x height*limb
    joints: Tuple[Tuple[str, str, float], ...]  # (joint, axis, sign), composed left to right
    start: Tuple[float, float, float]         # capsule start in segment frame, x height
    axis: Tuple[float, float, float]
    e1: Tuple[float, float, float]
    e2: Tuple[float, float, float]
    length_h: float
    length_hl: float
    r1: float
    r2: float
    ra: float
    rings: int


_X, _Y, _Z = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)
_NX, _NZ = (-1.0, 0.0, 0.0), (0.0, 0.0, -1.0)
_O = (0.0, 0.0, 0.0)
_AROUND = 8


def _segments() -> List[_Segment]:
    segs = [
        _Segment("pelvis", -1, _O, _O, (), (-0.09, 0.0, 0.0), _X, _Y, _Z, 0.18, 0.0, 0.085, 0.085, 0.085, 5),
        _Segment("torso", 0, (0.0, 0.0, 0.08), _O, (("spine_flex", "x", -1.0), ("spine_bend", "y", 1.0)),
                 (0.0, 0.0, 0.06), _Z, _X, _Y, 0.36, 0.0, 0.15, 0.10, 0.10, 10),
        _Segment("head", 1, (0.0, 0.0, 0.62), _O, (), _O, _Z, _X, _Y, 0.06, 0.0, 0.09, 0.09, 0.09, 6),
    ]
    for side, sx in (("r", 1.0), ("l", -1.0)):
        ax = _X if sx > 0 else _NX
        segs += [
            _Segment(f"upper_arm_{side}", 1, (0.19 * sx, 0.0, 0.46), _O,
                     ((f"shoulder_flex_{side}", "z", sx), (f"shoulder_abd_{side}", "y", sx)),
                     _O, ax, _Y, _Z, 0.0, 0.26, 0.045, 0.045, 0.045, 5),
        ]
    for side, sx in (("r", 1.0), ("l", -1.0)):
        ax = _X if sx > 0 else _NX
        segs += [
            _Segment(f"forearm_{side}", 3 if sx > 0 else 4, _O, (0.28 * sx, 0.0, 0.0),
                     ((f"elbow_{side}", "z", sx),), _O, ax, _Y, _Z, 0.0, 0.26, 0.04, 0.04, 0.04, 5),
        ]
    for side, sx in (("r", 1.0), ("l", -1.0)):
        segs += [
            _Segment(f"thigh_{side}", 0, (0.09 * sx, 0.0, 0.0), _O,
                     ((f"hip_flex_{side}", "x", 1.0), (f"hip_abd_{side}", "y", -sx)),
                     _O, _NZ, _X, _Y, 0.0, 0.42, 0.075, 0.075, 0.075, 7),
        ]
    for side, sx in (("r", 1.0), ("l", -1.0)):
        segs += [
            _Segment(f"shin_{side}", 7 if sx > 0 else 8, _O, (0.0, 0.0, -0.42),
                     ((f"knee_{side}", "x", -1.0),), _O, _NZ, _X, _Y, 0.0, 0.40, 0.055, 0.055, 0.055, 7),
        ]
    for side, sx in (("r", 1.0), ("l", -1.0)):
        segs += [
            _Segment(f"foot_{side}", 9 if sx > 0 else 10, _O, (0.0, 0.0, -0.42),
                     ((f"ankle_{side}", "x", 1.0),), (0.0, -0.04, -0.05), _Y, _X, _Z,
                     0.17, 0.0, 0.045, 0.035, 0.035, 4),
        ]
    return segs


def _capsule_profile(length: float, ra: float, rings: int):
    """Per-vertex (alpha, beta, gamma, psi) with axial = alpha*L + beta*ra, radial = gamma.

    Rings are spaced by arc length along the profile at the template shape;
    the coefficients then stay fixed so vertices are linear in L and radii.
    """
    total = math.pi * ra + length
    coeffs = [(1.0, 1.0, 0.0, 0.0)]  # top pole
    for j in range(1, rings + 1):
        s = total * j / (rings + 1)
        if s <= math.pi * ra / 2:
            phi = s / ra
            a, b, g = 1.0, math.cos(phi), math.sin(phi)
        elif s <= math.pi * ra / 2 + length:
            a, b, g = 1.0 - (s - math.pi * ra / 2) / length, 0.0, 1.0
        else:
            phi = math.pi / 2 + (s - math.pi * ra / 2 - length) / ra
            a, b, g = 0.0, math.cos(phi), math.sin(phi)
        for k in range(_AROUND):
            coeffs.append((a, b, g, 2 * math.pi * k / _AROUND))
    coeffs.append((0.0, -1.0, 0.0, 0.0))  # bottom pole
    return np.array(coeffs)


def _capsule_faces(rings: int, base: int) -> np.ndarray:
    f = []
    top, bottom = base, base + 1 + rings * _AROUND
    ring = lambda j, k: base + 1 + j * _AROUND + (k % _AROUND)
    for k in range(_AROUND):
        f.append((top, ring(0, k + 1), ring(0, k)))
    for j in range(rings - 1):
        for k in range(_AROUND):
            a, b = ring(j, k), ring(j, k + 1)
            c, d = ring(j + 1, k), ring(j + 1, k + 1)
            f.append((a, b, d))
            f.append((a, d, c))
    for k in range(_AROUND):
        f.append((bottom, ring(rings - 1, k), ring(rings - 1, k + 1)))
    return np.array(f, dtype=np.int64)


def _rot(axis: str, angle: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    o, z = torch.ones_like(c), torch.zeros_like(c)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    else:
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    return torch.stack([torch.stack(r, dim=-1) for r in rows], dim=-2)


class BodyModel:
    """Fixed-topology procedural body (642 vertices by default)."""

    def __init__(self):
        self.segments = _segments()
        profiles, faces, seg_ids = [], [], []
        base = 0
        for si, seg in enumerate(self.segments):
            L = seg.length_h + seg.length_hl
            prof = _capsule_profile(L, seg.ra, seg.rings)
            profiles.append(prof)
            faces.append(_capsule_faces(seg.rings, base))
            seg_ids += [si] * len(prof)
            base += len(prof)
        prof = np.concatenate(profiles)
        self.faces = np.concatenate(faces)
        self.segment_ids = np.array(seg_ids, dtype=np.int64)
        self.n_vertices = len(self.segment_ids)
        self._alpha = torch.tensor(prof[:, 0])
        self._beta = torch.tensor(prof[:, 1])
        self._gc = torch.tensor(prof[:, 2] * np.cos(prof[:, 3]))
        self._gs = torch.tensor(prof[:, 2] * np.sin(prof[:, 3]))
        self._seg_ids_t = torch.tensor(self.segment_ids)

        feet = np.zeros(self.n_vertices, dtype=bool)
        for si, seg in enumerate(self.segments):
            if seg.name.startswith("foot_"):
                sel = self.segment_ids == si
                # sole: the bottom quarter-arc of the foot capsule (e2 is world-up at rest)
                feet[sel] = prof[sel, 2] * np.sin(prof[sel, 3]) < -0.5
        self.feet_mask = feet

        sid = {s.name: i for i, s in enumerate(self.segments)}
        self.segment_index = sid
        # hip-axis landmarks: extreme pelvis vertices along the capsule axis
        pel = np.nonzero(self.segment_ids == sid["pelvis"])[0]
        self.landmark_right = pel[0]    # top pole sits at +x
        self.landmark_left = pel[-1]

    # -- kinematics ---------------------------------------------------------

    def _segment_dims(self, scales: torch.Tensor):
        h, g, l = scales[0], scales[1], scales[2]
        dims = []
        for seg in self.segments:
            L = h * seg.length_h + h * l * seg.length_hl
            dims.append((L, g * seg.r1, g * seg.r2, g * seg.ra))
        return dims

    def forward_torch(self, vec: torch.Tensor) -> torch.Tensor:
        """Vertices (V, 3) from a parameter vector of length 23, differentiable."""
        dtype = vec.dtype
        trans, yaw = vec[0:3], vec[3]
        angles = vec[4:4 + N_JOINTS]
        scales = vec[4 + N_JOINTS:]
        h, l = scales[0], scales[2]
        t = lambda x: torch.tensor(x, dtype=dtype)

        Rw, tw = [], []
        root_R = _rot("z", yaw)
        for seg in self.segments:
            R = None
            for jname, axis, sign in seg.joints:
                r = _rot(axis, sign * angles[J[jname]])
                R = r if R is None else R @ r
            offset = h * t(seg.offset_h) + h * l * t(seg.offset_hl)
            if seg.parent < 0:
                pR, pt = root_R, trans
            else:
                pR, pt = Rw[seg.parent], tw[seg.parent]
            Rw.append(pR if R is None else pR @ R)
            tw.append(pt + pR @ offset)

        dims = self._segment_dims(scales)
        L = torch.stack([d[0] for d in dims])
        r1 = torch.stack([d[1] for d in dims])
        r2 = torch.stack([d[2] for d in dims])
        ra = torch.stack([d[3] for d in dims])
        start = torch.stack([h * t(s.start) for s in self.segments])
        axis = t([s.axis for s in self.segments])
        e1 = t([s.e1 for s in self.segments])
        e2 = t([s.e2 for s in self.segments])

        sid = self._seg_ids_t
        axial = self._alpha.to(dtype) * L[sid] + self._beta.to(dtype) * ra[sid]
        local = (start[sid] + axial[:, None] * axis[sid]
                 + (self._gc.to(dtype) * r1[sid])[:, None] * e1[sid]
                 + (self._gs.to(dtype) * r2[sid])[:, None] * e2[sid])
        R_all = torch.stack(Rw)[sid]
        t_all = torch.stack(tw)[sid]
        return torch.einsum("vij,vj->vi", R_all, local) + t_all

    def forward(self, params: BodyParams) -> BodyMesh:
        vec, clamped = clamp_params(params.to_vector())
        if clamped:
            warnings.warn("body parameters outside joint/shape limits were clamped", RuntimeWarning)
        with torch.no_grad():
            v = self.forward_torch(torch.tensor(vec, dtype=torch.float64)).numpy()
        return BodyMesh(v, self.faces, self.feet_mask, clamped)

    def vertices(self, params: BodyParams) -> np.ndarray:
        return self.forward(params).vertices

    # -- template helpers ---------------------------------------------------

    def leg_length(self, scales=(1.0, 1.0, 1.0)) -> float:
        """Hip joint to sole distance for a straight leg."""
        h, g, l = scales
        return 0.42 * h * l + 0.42 * h * l + 0.05 * h + 0.035 * g

    def template(self) -> BodyMesh:
        return self.forward(BodyParams())

    def save_template(self, obj_path: Union[str, Path]) -> Path:
        """Write the rest-pose OBJ and a sidecar listing segment vertices and the feet mask."""
        obj_path = Path(obj_path)
        save_mesh(self.template().to_trimesh(), obj_path)
        side = obj_path.with_suffix(".segments.txt")
        with open(side, "w") as fh:
            for si, seg in enumerate(self.segments):
                idx = np.nonzero(self.segment_ids == si)[0]
                fh.write(f"segment {seg.name} " + " ".join(map(str, idx)) + "\n")
            fh.write("feet " + " ".join(map(str, np.nonzero(self.feet_mask)[0])) + "\n")
        return side


@lru_cache(maxsize=1)
def get_body_model() -> BodyModel:
    return BodyModel()


def clamp_params(vec) -> Tuple[np.ndarray, bool]:
    v = np.array(vec, dtype=np.float64).reshape(N_PARAMS)
    ang = v[4:4 + N_JOINTS]
    sc = v[4 + N_JOINTS:]
    new_ang = np.clip(ang, JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1])
    new_sc = np.clip(sc, SCALE_LIMITS[0], SCALE_LIMITS[1])
    clamped = bool(np.any(new_ang != ang) or np.any(new_sc != sc))
    v[4:4 + N_JOINTS] = new_ang
    v[4 + N_JOINTS:] = new_sc
    return v, clamped


# ---------------------------------------------------------------------------
# priors

def pose_prior(angles, joints=None):
    w = JOINT_PRIOR_WEIGHTS if joints is None else JOINT_PRIOR_WEIGHTS[joints]
    a = angles if joints is None else angles[..., joints]
    if isinstance(a, torch.Tensor):
        w = torch.as_tensor(w, dtype=a.dtype)
    return (w * a * a).sum(-1)


def shape_prior(scales):
    ls = torch.log(scales) if isinstance(scales, torch.Tensor) else np.log(scales)
    return (ls * ls).sum(-1)


def param_prior(params: BodyParams) -> float:
    """Range-weighted squared joint angles about the rest pose plus squared log shape scales."""
    return float(pose_prior(params.joint_angles) + shape_prior(params.shape_scale))


def param_prior_grad(params: BodyParams) -> np.ndarray:
    """Gradient of :func:`param_prior` with respect to the 23-vector."""
    g = np.zeros(N_PARAMS)
    g[4:4 + N_JOINTS] = 2 * JOINT_PRIOR_WEIGHTS * params.joint_angles
    g[4 + N_JOINTS:] = 2 * np.log(params.shape_scale) / params.shape_scale
    return g


# ---------------------------------------------------------------------------
# pose sampling

SEAT_HEIGHT = 0.45
_GAP = 0.004


def _clip_angles(a):
    return np.clip(a, JOINT_LIMITS[:, 0] + 1e-6, JOINT_LIMITS[:, 1] - 1e-6)


def _draw_shape(rng):
    return np.array([np.clip(rng.normal(1.0, 0.04), 0.9, 1.1),
                     np.clip(rng.normal(1.0, 0.04), 0.9, 1.1),
                     np.clip(rng.normal(1.0, 0.03), 0.92, 1.08)])


def _arms(rng, a, abd_mu, abd_sd, flex_mu, flex_sd, elbow_mu, elbow_sd):
    for side in "rl":
        a[J[f"shoulder_abd_{side}"]] = rng.normal(abd_mu, abd_sd)
        a[J[f"shoulder_flex_{side}"]] = rng.normal(flex_mu, flex_sd)
        a[J[f"elbow_{side}"]] = abs(rng.normal(elbow_mu, elbow_sd))


def sample_pose(category: str, seed: int, model: Optional[BodyModel] = None,
                seat_height: float = SEAT_HEIGHT) -> BodyParams:
    """Draw a pose for ``category`` at the origin (x = y = 0, yaw = 0).

    Standing and lying bodies rest on the plane z = 0; sitting bodies rest on
    a seat top at ``seat_height`` with feet clear of the floor.
    """
    model = model or get_body_model()
    rng = np.random.default_rng(seed)
    shape = _draw_shape(rng)
    a = np.zeros(N_JOINTS)
    if category == "standing":
        a[J["spine_flex"]] = rng.normal(0.05, 0.08)
        a[J["spine_bend"]] = rng.normal(0.0, 0.05)
        for side in "rl":
            a[J[f"hip_flex_{side}"]] = rng.normal(0.0, 0.12)
            a[J[f"hip_abd_{side}"]] = min(abs(rng.normal(0.04, 0.04)), 0.1)
            a[J[f"knee_{side}"]] = abs(rng.normal(0.0, 0.12))
            a[J[f"ankle_{side}"]] = a[J[f"knee_{side}"]] - a[J[f"hip_flex_{side}"]]
        _arms(rng, a, 1.1, 0.35, 0.2, 0.35, 0.3, 0.4)
    elif category == "sitting":
        a[J["spine_flex"]] = rng.normal(0.1, 0.1)
        a[J["spine_bend"]] = rng.normal(0.0, 0.04)
        for side in "rl":
            a[J[f"hip_flex_{side}"]] = math.pi / 2 + abs(rng.normal(0.0, 0.06))
            a[J[f"hip_abd_{side}"]] = abs(rng.normal(0.08, 0.05))
            a[J[f"knee_{side}"]] = rng.normal(1.55, 0.1)
            a[J[f"ankle_{side}"]] = rng.normal(0.0, 0.1)
        _arms(rng, a, 1.3, 0.1, 0.3, 0.2, 1.1, 0.2)
    elif category == "lying":
        a[J["spine_flex"]] = -math.pi / 2 + abs(rng.normal(0.0, 0.03))
        a[J["spine_bend"]] = rng.normal(0.0, 0.05)
        for side in "rl":
            a[J[f"hip_flex_{side}"]] = math.pi / 2 + abs(rng.normal(0.0, 0.04))
            a[J[f"hip_abd_{side}"]] = abs(rng.normal(0.08, 0.05))
            a[J[f"knee_{side}"]] = abs(rng.normal(0.0, 0.05))
            a[J[f"ankle_{side}"]] = rng.normal(0.0, 0.15)
        _arms(rng, a, 0.5, 0.4, 0.0, 0.1, 0.2, 0.2)
    else:
        raise ValueError(f"unknown pose category {category!r}")
    a = _clip_angles(a)
    params = BodyParams(np.zeros(3), 0.0, a, shape)

    if category == "sitting":
        params = _settle_sitting(params, model, seat_height)
    else:
        if category == "standing":
            params = _level_feet(params, model)
        v = model.vertices(params)
        params = params.replace(translation=np.array([0.0, 0.0, _GAP - v[:, 2].min()]))
    return params


def mean_pose(category: str) -> np.ndarray:
    """Joint angles at the centre of the sampling distribution for ``category``."""
    a = np.zeros(N_JOINTS)
    arms = {"standing": (1.1, 0.2, 0.3), "sitting": (1.3, 0.3, 1.1), "lying": (0.5, 0.0, 0.2)}
    if category not in arms:
        raise ValueError(f"unknown pose category {category!r}")
    if category == "standing":
        a[J["spine_flex"]] = 0.05
        hip, abd, knee = 0.0, 0.04, 0.0
    elif category == "sitting":
        a[J["spine_flex"]] = 0.1
        hip, abd, knee = math.pi / 2, 0.08, 1.55
    else:
        a[J["spine_flex"]] = -math.pi / 2
        hip, abd, knee = math.pi / 2, 0.08, 0.0
    for side in "rl":
        a[J[f"hip_flex_{side}"]] = hip
        a[J[f"hip_abd_{side}"]] = abd
        a[J[f"knee_{side}"]] = knee
        abd_s, flex_s, elbow = arms[category]
        a[J[f"shoulder_abd_{side}"]] = abd_s
        a[J[f"shoulder_flex_{side}"]] = flex_s
        a[J[f"elbow_{side}"]] = elbow
    return _clip_angles(a)


def _level_feet(params: BodyParams, model: BodyModel, tol: float = 5e-4) -> BodyParams:
    """Bend the longer leg's knee (foot kept parallel) until both soles reach the same height.

    Leg height is not monotone in the knee angle when the hip is flexed, so the
    knee is stepped up until the height order flips and then bisected.
    """
    soles = {side: model.feet_mask & (model.segment_ids == model.segment_index[f"foot_{side}"]) for side in "rl"}
    knee_hi = JOINT_LIMITS[J["knee_r"], 1] - 1e-6
    base = params.joint_angles
    g = _sole_gap(model, params, base, soles)
    if abs(g) <= tol:
        return params
    side = "r" if g < 0 else "l"
    kj, aj = J[f"knee_{side}"], J[f"ankle_{side}"]

    def bent(k):
        a = base.copy()
        a[kj], a[aj] = k, base[aj] + (k - base[kj])
        return a

    def lower(k):  # still the lower foot
        return (_sole_gap(model, params, bent(k), soles) < 0) == (side == "r")

    lo, hi = base[kj], base[kj]
    while lower(hi):
        lo, hi = hi, min(hi + 0.05, knee_hi)
        if lo == knee_hi:
            return params.replace(joint_angles=_clip_angles(bent(lo)))
    for _ in range(12):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if lower(mid) else (lo, mid)
    return params.replace(joint_angles=_clip_angles(bent(hi)))


def _sole_gap(model: BodyModel, params: BodyParams, angles, soles) -> float:
    v = model.vertices(params.replace(joint_angles=angles))
    return float(v[soles["r"], 2].min() - v[soles["l"], 2].min())


def _settle_sitting(params: BodyParams, model: BodyModel, seat_height: float) -> BodyParams:
    sid = model.segment_ids
    seat_part = np.isin(sid, [model.segment_index[n] for n in ("pelvis", "thigh_r", "thigh_l")])
    v = model.vertices(params)
    params = params.replace(translation=np.array([0.0, 0.0, seat_height + _GAP - v[seat_part, 2].min()]))
    # extend the knees until the lower legs clear the floor
    a = params.joint_angles.copy()
    for side in "rl":
        lower = np.isin(sid, [model.segment_index[f"shin_{side}"], model.segment_index[f"foot_{side}"]])
        for _ in range(200):
            v = model.vertices(params.replace(joint_angles=a))
            if v[lower, 2].min() >= _GAP:
                break
            a[J[f"knee_{side}"]] = max(a[J[f"knee_{side}"]] - 0.01, JOINT_LIMITS[J["knee_r"], 0])
    return params.replace(joint_angles=a)
