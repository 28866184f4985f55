"""Fit body parameters to regressed vertices and a body feature.

The objective combines vertex and feature reconstruction with optional scene
terms (collision, foot contact) and priors on pose and shape. ``simoptim``
drops the scene terms; ``advoptim`` keeps them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import torch

from .body import (DISTAL_JOINTS, JOINT_LIMITS, N_JOINTS, PROXIMAL_JOINTS, SCALE_LIMITS, BodyModel,
                   BodyParams, get_body_model, mean_pose, pose_prior, shape_prior)
from .bps import feature_from_body
from .losses import cage_to_world_torch, loss_collision, loss_contact, world_to_cage_torch
from .mesh import CageTransform
from .spatial import PointIndex, SdfField

VARIANTS = ("simoptim", "advoptim")


class FitDivergedError(RuntimeError):
    def __init__(self, msg: str, trajectory: List[float]):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass
class OptimConfig:
    lambda1: float = 8.0      # collision
    lambda2: float = 0.5      # foot contact
    lambda3: float = 0.02     # proximal pose prior
    lambda4: float = 0.01     # distal pose prior
    lambda5: float = 0.01     # shape prior
    steps: int = 300
    step_size: float = 0.01
    variant: str = "advoptim"
    contact_sigma: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        lams = (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)
        if min(lams) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.steps < 0 or not self.step_size > 0:
            raise ValueError("steps must be >= 0 and step_size > 0")

    @property
    def scene_terms(self) -> bool:
        return self.variant == "advoptim"

    @classmethod
    def for_room(cls, room_extent, **kw) -> "OptimConfig":
        """Strong collision weight for rooms up to 8 m per side, weak beyond."""
        big = max(float(x) for x in room_extent) > 8.0
        return cls(lambda1=0.1 if big else 8.0, **kw)


@dataclass
class OptimResult:
    params: BodyParams
    final_losses: Dict[str, float]
    trajectory: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# initialization

def _span(points: np.ndarray, a: int, b: int) -> float:
    return float(np.linalg.norm(points[a] - points[b]))


def init_from_vertices(target_vertices, model: Optional[BodyModel] = None) -> BodyParams:
    """Rest-pose parameters matching the target's root placement and proportions.

    Translation is the pelvis-ring centroid, yaw follows the hip landmark axis,
    girth and height come from the pelvis capsule and limb length from the
    right thigh capsule. For targets produced by the body model these are exact.
    """
    model = model or get_body_model()
    v = np.asarray(target_vertices, dtype=np.float64)
    if v.shape != (model.n_vertices, 3):
        raise ValueError(f"target must be ({model.n_vertices}, 3), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("target vertices must be finite")
    if np.any(np.ptp(v, axis=0) <= 1e-9):
        raise ValueError("degenerate target: zero extent along an axis")
    sid = model.segment_index
    pel = np.nonzero(model.segment_ids == sid["pelvis"])[0]
    thigh = np.nonzero(model.segment_ids == sid["thigh_r"])[0]
    trans = v[pel].mean(0)
    axis = v[model.landmark_right] - v[model.landmark_left]
    yaw = math.atan2(axis[1], axis[0])

    # pelvis: poles sit 0.09h + 0.085g from the centre; rings reach 0.085g off axis
    u = axis / np.linalg.norm(axis)
    rel = v[pel] - trans
    radial = np.linalg.norm(rel - np.outer(rel @ u, u), axis=1).max()
    g = radial / 0.085
    h = (_span(v, pel[0], pel[-1]) - 2 * 0.085 * g) / 0.18
    # thigh: pole-to-pole length is 0.42hl + 2 * 0.075g
    l = (_span(v, thigh[0], thigh[-1]) - 2 * 0.075 * g) / (0.42 * h) if h > 0 else 1.0
    scales = np.clip(np.array([h, g, l]), SCALE_LIMITS[0], SCALE_LIMITS[1])
    return BodyParams(trans, yaw, np.zeros(N_JOINTS), scales)


# ---------------------------------------------------------------------------
# objective

def _to_theta(params: BodyParams) -> np.ndarray:
    v = params.to_vector().copy()
    v[4 + N_JOINTS:] = np.log(v[4 + N_JOINTS:])
    return v


def _from_theta(theta: np.ndarray) -> BodyParams:
    v = np.asarray(theta, dtype=np.float64).copy()
    v[4 + N_JOINTS:] = np.exp(v[4 + N_JOINTS:])
    return BodyParams.from_vector(v)


_ANG = slice(4, 4 + N_JOINTS)
_SC = slice(4 + N_JOINTS, 7 + N_JOINTS)


class FitObjective:
    """Total fitting loss as a differentiable function of theta = [T, yaw, angles, log scales]."""

    def __init__(self, target_vertices, target_feature, scene_bps, transform: CageTransform,
                 config: OptimConfig, sdf: Optional[SdfField] = None, scene_index: Optional[PointIndex] = None,
                 model: Optional[BodyModel] = None):
        self.model = model or get_body_model()
        tv = np.asarray(target_vertices, dtype=np.float64)
        if tv.shape != (self.model.n_vertices, 3):
            raise ValueError(f"target must be ({self.model.n_vertices}, 3), got {tv.shape}")
        self.tr = transform
        self.cfg = config
        self.target_world = cage_to_world_torch(torch.from_numpy(tv), transform)
        self.target_feature = None if target_feature is None else torch.as_tensor(
            np.asarray(target_feature, dtype=np.float64))
        self.scene_bps = None if scene_bps is None else np.asarray(scene_bps, dtype=np.float64)
        if (self.target_feature is None) != (self.scene_bps is None):
            raise ValueError("target_feature and scene_bps must be given together")
        if config.scene_terms and (sdf is None or scene_index is None):
            raise ValueError("advoptim needs an SDF and a scene vertex index")
        self.sdf = sdf
        self.index = scene_index

    def terms(self, theta: torch.Tensor) -> Dict[str, torch.Tensor]:
        vec = torch.cat([theta[:4 + N_JOINTS], torch.exp(theta[_SC])])
        verts = self.model.forward_torch(vec)
        zero = torch.zeros((), dtype=theta.dtype)
        out = {"vertex": (verts - self.target_world).abs().sum(-1).mean()}
        if self.target_feature is not None:
            f = feature_from_body(world_to_cage_torch(verts, self.tr), self.scene_bps)
            out["feature"] = (f - self.target_feature).abs().mean()
        else:
            out["feature"] = zero
        if self.cfg.scene_terms:
            out["collision"] = loss_collision(verts, self.sdf)
            out["contact"] = loss_contact(verts, self.model.feet_mask, self.index, self.cfg.contact_sigma)
        else:
            out["collision"] = zero
            out["contact"] = zero
        ang = theta[_ANG]
        out["pose_proximal"] = pose_prior(ang, PROXIMAL_JOINTS)
        out["pose_distal"] = pose_prior(ang, DISTAL_JOINTS)
        out["shape"] = shape_prior(torch.exp(theta[_SC]))
        c = self.cfg
        lam1, lam2 = (c.lambda1, c.lambda2) if c.scene_terms else (0.0, 0.0)
        out["total"] = (out["vertex"] + out["feature"] + lam1 * out["collision"] + lam2 * out["contact"]
                        + c.lambda3 * out["pose_proximal"] + c.lambda4 * out["pose_distal"]
                        + c.lambda5 * out["shape"])
        return out

    def __call__(self, theta: torch.Tensor) -> torch.Tensor:
        return self.terms(theta)["total"]


def _project(theta: torch.Tensor) -> None:
    with torch.no_grad():
        lo = torch.as_tensor(JOINT_LIMITS[:, 0], dtype=theta.dtype)
        hi = torch.as_tensor(JOINT_LIMITS[:, 1], dtype=theta.dtype)
        theta[_ANG] = torch.maximum(torch.minimum(theta[_ANG], hi), lo)
        theta[_SC] = theta[_SC].clamp(math.log(SCALE_LIMITS[0]), math.log(SCALE_LIMITS[1]))


def select_init(objective: FitObjective, base: BodyParams) -> BodyParams:
    """Lowest-objective start among the rest pose and the per-category mean poses."""
    cands = [base] + [base.replace(joint_angles=mean_pose(c)) for c in ("standing", "sitting", "lying")]
    best, best_val = base, math.inf
    with torch.no_grad():
        for c in cands:
            val = float(objective(torch.tensor(_to_theta(c), dtype=torch.float64)))
            if val < best_val:
                best, best_val = c, val
    return best


def fit_body(target_vertices, target_feature, scene_bps, transform: CageTransform, config: OptimConfig,
             init: Optional[BodyParams] = None, sdf: Optional[SdfField] = None,
             scene_index: Optional[PointIndex] = None, model: Optional[BodyModel] = None) -> OptimResult:
    """Adam on the fitting objective with cosine step decay; returns the best iterate.

    ``target_vertices`` and ``scene_bps`` are in the cage frame of ``transform``;
    the returned parameters are in the world frame.
    """
    model = model or get_body_model()
    obj = FitObjective(target_vertices, target_feature, scene_bps, transform, config, sdf, scene_index, model)
    if init is None:
        base = init_from_vertices(transform.cage_to_world(np.asarray(target_vertices, dtype=np.float64)), model)
        init = select_init(obj, base)
    theta0 = _to_theta(init)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("initial parameters must be finite")
    theta = torch.tensor(theta0, dtype=torch.float64, requires_grad=True)
    _project(theta)
    opt = torch.optim.Adam([theta], lr=config.step_size)
    best_loss, best_theta = math.inf, theta.detach().clone()
    trajectory: List[float] = []
    for step in range(config.steps + 1):
        loss = obj(theta)
        val = float(loss.detach())
        if not math.isfinite(val):
            raise FitDivergedError(f"non-finite fitting loss at step {step}", trajectory)
        trajectory.append(val)
        if val < best_loss:
            best_loss, best_theta = val, theta.detach().clone()
        if step == config.steps:
            break
        for group in opt.param_groups:
            group["lr"] = config.step_size * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _project(theta)
    with torch.no_grad():
        final = {k: float(v) for k, v in obj.terms(best_theta).items()}
    return OptimResult(_from_theta(best_theta.numpy()), final, trajectory)
