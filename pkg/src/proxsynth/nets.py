"""Scene autoencoder E, scene-BPS encoder F, scene-conditioned VAE G and vertex regressor H."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class NetConfig:
    n_basis: int = 1024
    n_vertices: int = 642
    d_z: int = 32
    hidden: Tuple[int, ...] = (512, 256)
    n_skip: int = 2
    slope: float = 0.2
    basis_seed: int = 7

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 <= self.n_skip <= len(self.hidden):
            raise ValueError("n_skip must be between 0 and the number of hidden widths")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def arch_hash(self) -> bytes:
        arch = {k: v for k, v in asdict(self).items() if k != "basis_seed"}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()[:16]


class ResBlock(nn.Module):
    def __init__(self, width: int, slope: float):
        super().__init__()
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.slope = slope

    def forward(self, x):
        h = F.leaky_relu(self.fc1(x), self.slope)
        return F.leaky_relu(x + self.fc2(h), self.slope)


class SceneAutoencoder(nn.Module):
    """E: autoencodes the scene feature and exposes decoder activations for conditioning."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        widths = [cfg.n_basis, *cfg.hidden]
        self.enc = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        rev = list(reversed(cfg.hidden))
        dec_w = [rev[0], *rev]
        self.dec = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dec_w[:-1], dec_w[1:]))
        self.out = nn.Linear(rev[-1], cfg.n_basis)
        self.slope = cfg.slope
        self.n_skip = cfg.n_skip

    def encode(self, x_s):
        h = x_s
        for layer in self.enc:
            h = F.leaky_relu(layer(h), self.slope)
        return h

    def forward(self, x_s):
        latent = self.encode(x_s)
        h, acts = latent, []
        for layer in self.dec:
            h = F.leaky_relu(layer(h), self.slope)
            acts.append(h)
        return self.out(h), latent, acts[: self.n_skip]


class SceneConditionedVAE(nn.Module):
    """G: encodes a body feature given the scene latent; decodes with extra scene skips."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        s = cfg.slope
        hl = cfg.hidden[-1]
        enc_w = list(cfg.hidden)
        self.enc_in = nn.Linear(cfg.n_basis + hl, enc_w[0])
        self.enc_res = nn.ModuleList(ResBlock(w, s) for w in enc_w)
        self.enc_down = nn.ModuleList(nn.Linear(a, b) for a, b in zip(enc_w[:-1], enc_w[1:]))
        self.mu = nn.Linear(hl, cfg.d_z)
        self.logvar = nn.Linear(hl, cfg.d_z)

        rev = list(reversed(cfg.hidden))
        self.dec_in = nn.Linear(cfg.d_z + hl, rev[0])
        self.dec_res = nn.ModuleList(ResBlock(w, s) for w in rev)
        skip_w = [rev[i] if i < cfg.n_skip else 0 for i in range(len(rev))]
        self.dec_up = nn.ModuleList(nn.Linear(rev[i] + skip_w[i], rev[i + 1]) for i in range(len(rev) - 1))
        self.out = nn.Linear(rev[-1] + skip_w[-1], cfg.n_basis)
        self.slope = s

    def encode(self, x_b, scene_latent):
        h = F.leaky_relu(self.enc_in(torch.cat([x_b, scene_latent], -1)), self.slope)
        for i, block in enumerate(self.enc_res):
            h = block(h)
            if i < len(self.enc_down):
                h = F.leaky_relu(self.enc_down[i](h), self.slope)
        return self.mu(h), self.logvar(h)

    def decode(self, z, scene_latent, skips: List[torch.Tensor]):
        h = F.leaky_relu(self.dec_in(torch.cat([z, scene_latent], -1)), self.slope)
        for i, block in enumerate(self.dec_res):
            h = block(h)
            if i < len(skips):
                h = torch.cat([h, skips[i]], -1)
            if i < len(self.dec_up):
                h = F.leaky_relu(self.dec_up[i](h), self.slope)
        return F.softplus(self.out(h))


class SceneBpsEncoder(nn.Module):
    """F: embeds the scene basis point coordinates."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        widths = [3 * cfg.n_basis, *cfg.hidden]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.slope = cfg.slope

    def forward(self, V_s):
        h = V_s.reshape(*V_s.shape[:-2], -1)
        for layer in self.layers:
            h = F.leaky_relu(layer(h), self.slope)
        return h


class VertexRegressor(nn.Module):
    """H: body vertices (relative to a template) plus one global translation."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        h0 = cfg.hidden[0]
        self.fc_in = nn.Linear(cfg.hidden[-1] + cfg.n_basis, h0)
        self.res = ResBlock(h0, cfg.slope)
        self.out = nn.Linear(h0, 3 * cfg.n_vertices + 3)
        with torch.no_grad():
            self.out.weight.mul_(0.01)
            self.out.bias.zero_()
        self.register_buffer("template", torch.zeros(cfg.n_vertices, 3))
        self.slope = cfg.slope
        self.n_vertices = cfg.n_vertices

    def forward(self, bps_code, x_b):
        h = F.leaky_relu(self.fc_in(torch.cat([bps_code, x_b], -1)), self.slope)
        o = self.out(self.res(h))
        verts = o[..., : 3 * self.n_vertices].reshape(*o.shape[:-1], self.n_vertices, 3) + self.template
        return verts, o[..., 3 * self.n_vertices:]


class PlaceNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.E = SceneAutoencoder(cfg)
        self.F = SceneBpsEncoder(cfg)
        self.G = SceneConditionedVAE(cfg)
        self.H = VertexRegressor(cfg)

    def _check(self, x, n, what):
        if x.shape[-1] != n:
            raise ValueError(f"{what}: expected last dimension {n}, got {tuple(x.shape)}")

    def encode_decode_scene(self, x_s):
        self._check(x_s, self.cfg.n_basis, "scene feature")
        return self.E(x_s)

    def cvae_forward(self, x_b, x_s, eps):
        """Returns (x_b_rec, mu, logvar, z, x_s_rec)."""
        self._check(x_b, self.cfg.n_basis, "body feature")
        self._check(eps, self.cfg.d_z, "noise")
        x_s_rec, latent, skips = self.encode_decode_scene(x_s)
        mu, logvar = self.G.encode(x_b, latent)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.G.decode(z, latent, skips), mu, logvar, z, x_s_rec

    def cvae_sample(self, x_s, z):
        self._check(z, self.cfg.d_z, "latent")
        _, latent, skips = self.encode_decode_scene(x_s)
        return self.G.decode(z, latent, skips)

    def regress_body(self, V_s, x_b):
        """Cage-frame vertices before the global shift, and the shift itself."""
        if V_s.shape[-2:] != (self.cfg.n_basis, 3):
            raise ValueError(f"scene BPS: expected (..., {self.cfg.n_basis}, 3), got {tuple(V_s.shape)}")
        self._check(x_b, self.cfg.n_basis, "body feature")
        return self.H(self.F(V_s), x_b)

    @staticmethod
    def apply_delta(verts, delta):
        return verts + delta.unsqueeze(-2)

    def generate(self, x_s, V_s, z):
        x_b = self.cvae_sample(x_s, z)
        verts, delta = self.regress_body(V_s, x_b)
        return x_b, self.apply_delta(verts, delta)


# ---------------------------------------------------------------------------
# checkpoints

_CK_MAGIC = b"PSCK"
_CK_VERSION = 1


def save_checkpoint(model: PlaceNet, path: Union[str, Path]) -> None:
    cfg = model.cfg
    cfg_json = cfg.to_json().encode()
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<I16sIIQ", _CK_VERSION, cfg.arch_hash(), cfg.n_basis, cfg.d_z, cfg.basis_seed))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            nb = name.encode()
            arr = t.detach().to(torch.float32).contiguous().numpy()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[bytes] = None) -> PlaceNet:
    import numpy as np

    data = Path(path).read_bytes()
    if data[:4] != _CK_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 4
    version, ahash, n, d_z, basis_seed = struct.unpack_from("<I16sIIQ", data, off)
    off += struct.calcsize("<I16sIIQ")
    if version != _CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    cfg = NetConfig(**json.loads(data[off:off + clen].decode()))
    off += clen
    if cfg.arch_hash() != ahash or (expected_hash is not None and expected_hash != ahash):
        raise ArchitectureMismatch(f"{path}: architecture hash mismatch")
    if (cfg.n_basis, cfg.d_z, cfg.basis_seed) != (n, d_z, basis_seed):
        raise ArchitectureMismatch(f"{path}: header disagrees with stored config")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        size = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.copy())
    model = PlaceNet(cfg)
    model.load_state_dict(state)
    return model
