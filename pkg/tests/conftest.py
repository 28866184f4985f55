import math

import numpy as np
import pytest
from hypothesis import settings

from proxsynth.body import get_body_model
from proxsynth.mesh import TriMesh

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines at the end of the run (stdout is captured by default)."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(mod.REPORT_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def loop_nearest(points, queries):
    """Exhaustive double loop in plain Python; x, y, z summation order, first minimum wins."""
    idx, dist = [], []
    pts = [tuple(map(float, p)) for p in points]
    for q in queries:
        qx, qy, qz = map(float, q)
        best_i, best_d = -1, math.inf
        for i, (px, py, pz) in enumerate(pts):
            dx, dy, dz = qx - px, qy - py, qz - pz
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if d < best_d:
                best_i, best_d = i, d
        idx.append(best_i)
        dist.append(best_d)
    return np.array(idx), np.array(dist)


def rowwise_nearest(points, queries):
    """Exhaustive scan, one query row at a time; same arithmetic as loop_nearest."""
    p = np.asarray(points, dtype=np.float64)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for r, q in enumerate(np.asarray(queries, dtype=np.float64)):
        dx, dy, dz = q[0] - p[:, 0], q[1] - p[:, 1], q[2] - p[:, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        j = int(np.argmin(d))
        idx[r], dist[r] = j, d[j]
    return idx, dist


def central_diff(f, x, h):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def body_model():
    return get_body_model()


def floor_mesh(size=4.0, pitch=0.5):
    n = int(round(size / pitch)) + 1
    xs = np.linspace(0.0, size, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
    f = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            f += [(a, b, c), (a, c, d)]
    return TriMesh(v, np.array(f))


def tiny_net_batch(seed=0, n=16, d_z=2, n_vertices=12, batch=3):
    """Float64 miniature network and a random batch for gradient checks."""
    import torch
    from proxsynth.mesh import CageTransform
    from proxsynth.nets import NetConfig, PlaceNet

    torch.manual_seed(seed)
    net = PlaceNet(NetConfig(n_basis=n, n_vertices=n_vertices, d_z=d_z, hidden=(8, 6), n_skip=2)).double()
    g = torch.Generator().manual_seed(seed)
    b = {
        "x_s": torch.rand(batch, n, generator=g, dtype=torch.float64),
        "x_b": torch.rand(batch, n, generator=g, dtype=torch.float64),
        "V_s": torch.rand(batch, n, 3, generator=g, dtype=torch.float64) * 2 - 1,
        "V_b": torch.rand(batch, n_vertices, 3, generator=g, dtype=torch.float64) * 2 - 1,
        "transforms": [CageTransform.for_cage((0.5 * i, 0.0, 1.0), 2.0) for i in range(batch)],
    }
    eps = torch.randn(batch, d_z, generator=g, dtype=torch.float64)
    return net, b, eps


def param_grad_check(net, loss_fn, h=1e-6):
    """Relative error between autograd and central differences over every parameter entry."""
    import torch

    params = [p for p in net.parameters()]
    net.zero_grad()
    loss_fn().backward()
    ana = torch.cat([p.grad.reshape(-1) for p in params]).numpy()
    num = np.zeros_like(ana)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                dn = float(loss_fn())
                flat[i] = old
                num[k] = (up - dn) / (2 * h)
                k += 1
    return rel_err(ana, num)


TINY_DATA = dict(placements=20, augmentations=2, n_basis=64, placements_per_scene=5, test_fraction=0.25)


@pytest.fixture(scope="session")
def tiny_dataset():
    from proxsynth.synth import DataConfig, build_dataset
    return build_dataset(DataConfig(**TINY_DATA))
