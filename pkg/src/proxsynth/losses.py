"""Training and fitting losses: reconstruction, robust KL, collision and contact."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .mesh import CageTransform
from .spatial import PointIndex, SdfField


class MissingSceneError(ValueError):
    """Collision/contact terms are active but a sample has no scene context."""


def charbonnier(s):
    return torch.sqrt(s * s + 1.0) - 1.0


def geman_mcclure(x, sigma: float):
    x2 = x * x
    return x2 / (x2 + sigma * sigma)


def kl_standard_normal(mu, logvar, reduction: str = "sum"):
    """KL(N(mu, exp(logvar)) || N(0, I)) per sample, summed or averaged over the latent dimension."""
    per_dim = 0.5 * (mu * mu + torch.exp(logvar) - 1.0 - logvar)
    if reduction == "sum":
        return per_dim.sum(-1)
    if reduction == "mean":
        return per_dim.mean(-1)
    raise ValueError(f"unknown KL reduction {reduction!r}")


class _SdfEval(torch.autograd.Function):
    @staticmethod
    def forward(ctx, points, field):
        val, grad = field.eval_grad(points.detach().cpu().numpy().astype(np.float64))
        ctx.save_for_backward(torch.as_tensor(grad, dtype=points.dtype))
        return torch.as_tensor(val, dtype=points.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out.unsqueeze(-1) * grad, None


def sdf_torch(field: SdfField, points: torch.Tensor) -> torch.Tensor:
    return _SdfEval.apply(points, field)


def cage_to_world_torch(q: torch.Tensor, tr: CageTransform) -> torch.Tensor:
    p = q / tr.scale
    c, s = math.cos(-tr.world_yaw), math.sin(-tr.world_yaw)
    x = c * p[..., 0] - s * p[..., 1]
    y = s * p[..., 0] + c * p[..., 1]
    center = torch.as_tensor(tr.cage_center, dtype=q.dtype)
    return torch.stack([x, y, p[..., 2]], -1) + center


def world_to_cage_torch(p: torch.Tensor, tr: CageTransform) -> torch.Tensor:
    d = p - torch.as_tensor(tr.cage_center, dtype=p.dtype)
    c, s = math.cos(tr.world_yaw), math.sin(tr.world_yaw)
    x = c * d[..., 0] - s * d[..., 1]
    y = s * d[..., 0] + c * d[..., 1]
    return tr.scale * torch.stack([x, y, d[..., 2]], -1)


def loss_collision(vertices_world: torch.Tensor, sdf: SdfField) -> torch.Tensor:
    """Mean magnitude of the negative part of the scene SDF over body vertices."""
    vals = sdf_torch(sdf, vertices_world)
    return torch.clamp(vals, max=0.0).abs().sum() / vertices_world.shape[0]


def loss_contact(vertices_world: torch.Tensor, feet_mask, scene_index: PointIndex,
                 sigma: float = 0.2) -> torch.Tensor:
    """Sum of robust nearest-scene-vertex distances over the contact vertices."""
    feet = vertices_world[torch.as_tensor(np.asarray(feet_mask, bool))]
    if feet.shape[0] == 0:
        raise ValueError("contact mask selects no vertices")
    idx, _ = scene_index.query(feet.detach().cpu().numpy())
    target = torch.as_tensor(scene_index.points[idx], dtype=feet.dtype)
    d = torch.linalg.vector_norm(feet - target, dim=-1)
    return geman_mcclure(d, sigma).sum()


@dataclass
class LossWeights:
    alpha_kl: float = 0.5
    alpha_coll: float = 0.001
    alpha_contact: float = 0.001
    late_start: float = 0.75
    contact_sigma: float = 0.2
    kl_reduction: str = "mean"


@dataclass
class SceneContext:
    sdf: SdfField
    index: PointIndex


def loss_total(model, batch: Dict, weights: LossWeights, epoch_fraction: float, eps: torch.Tensor,
               contexts: Optional[Sequence[Optional[SceneContext]]] = None,
               feet_mask=None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Composite objective; returns the total and a per-term breakdown."""
    x_s, x_b, V_s, V_b = batch["x_s"], batch["x_b"], batch["V_s"], batch["V_b"]
    x_b_rec, mu, logvar, z, x_s_rec = model.cvae_forward(x_b, x_s, eps)
    verts, delta = model.regress_body(V_s, x_b_rec)
    V_rec = model.apply_delta(verts, delta)

    rec_xs = (x_s - x_s_rec).abs().mean()
    rec_xb = (x_b - x_b_rec).abs().mean()
    rec_vb = (V_b - V_rec).abs().mean()
    kl = kl_standard_normal(mu, logvar, weights.kl_reduction).mean()
    l_kl = charbonnier(kl)
    total = rec_xs + rec_xb + rec_vb + weights.alpha_kl * l_kl

    late = epoch_fraction >= weights.late_start
    zero = torch.zeros((), dtype=x_s.dtype)
    coll, contact = zero, zero
    if late and (weights.alpha_coll > 0 or weights.alpha_contact > 0):
        if contexts is None or any(c is None for c in contexts):
            raise MissingSceneError("collision/contact terms need an SDF and scene vertices per sample")
        if feet_mask is None:
            from .body import get_body_model
            feet_mask = get_body_model().feet_mask
        colls, conts = [], []
        for b, ctx in enumerate(contexts):
            world = cage_to_world_torch(V_rec[b], batch["transforms"][b])
            colls.append(loss_collision(world, ctx.sdf))
            conts.append(loss_contact(world, feet_mask, ctx.index, weights.contact_sigma))
        coll = torch.stack(colls).mean()
        contact = torch.stack(conts).mean()
        total = total + weights.alpha_coll * coll + weights.alpha_contact * contact
    parts = dict(total=total, rec_xs=rec_xs, rec_xb=rec_xb, rec_vb=rec_vb, kl=kl, l_kl=l_kl,
                 coll=coll, contact=contact)
    return total, parts
