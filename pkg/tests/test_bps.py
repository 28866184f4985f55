import math

import numpy as np
import pytest
import torch

from proxsynth.bps import (encode_body, encode_scene, feature_from_body, load_feature, make_basis,
                           nearest_body_vertex, save_feature)
from proxsynth.mesh import CageTransform, crop_local_scene

from conftest import central_diff, floor_mesh, loop_nearest


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestBasis:
    def test_deterministic(self):
        np.testing.assert_array_equal(make_basis(300, 11).points, make_basis(300, 11).points)

    def test_seed_changes_points(self):
        assert not np.array_equal(make_basis(50, 1).points, make_basis(50, 2).points)

    def test_inside_ball(self):
        b = make_basis(5000, 3)
        assert b.n == 5000 and np.linalg.norm(b.points, axis=1).max() < 1.0

    def test_mean_norm(self):
        # for X uniform in the unit ball, E|X| = integral of r * 3 r^2 dr = 3/4
        norms = np.linalg.norm(make_basis(1_000_000, 0).points, axis=1)
        assert abs(norms.mean() - 0.75) < 0.01

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            make_basis(0, 0)


class TestEncodeScene:
    def test_self_distance(self):
        b = make_basis(128, 5)
        enc = encode_scene(b, b.points)
        np.testing.assert_array_equal(enc.scene_feature, 0.0)
        np.testing.assert_array_equal(enc.scene_bps, b.points)

    def test_matches_loop(self):
        rng = np.random.default_rng(6)
        b = make_basis(256, 6)
        pts = rng.uniform(-1, 1, (500, 3))
        enc = encode_scene(b, pts)
        idx, dist = loop_nearest(pts, b.points)
        np.testing.assert_array_equal(enc.scene_feature, dist)
        np.testing.assert_array_equal(enc.scene_bps, pts[idx])

    def test_feature_is_sphere_frame_distance(self):
        rng = np.random.default_rng(7)
        tr = CageTransform.for_cage((0.0, 0.0, 1.0), 2.0).with_augmentation(0.9, [0.02, -0.01, 0.03])
        b = make_basis(200, 7)
        q = rng.uniform(-0.8, 0.8, (400, 3))
        enc = encode_scene(b, q, tr)
        d = np.linalg.norm(b.points - tr.cage_to_sphere(enc.scene_bps), axis=1)
        np.testing.assert_allclose(enc.scene_feature, d, atol=1e-6)
        assert np.all(enc.scene_feature >= 0)

    def test_cage_points_selected(self):
        local = crop_local_scene(floor_mesh(), (2.0, 2.0, 1.0), 2.0, 0.25)
        tr = CageTransform.for_cage((2.0, 2.0, 1.0), 2.0)
        b = make_basis(512, 8)
        enc = encode_scene(b, tr.world_to_cage(local.points), tr, local.cage_flags)
        assert enc.source_flags.any() and not enc.source_flags.all()
        # upper basis points pick ceiling or wall samples, not the floor
        top = b.points[:, 2] > 0.5
        assert enc.source_flags[top].all()

    def test_floor_only_never_reaches_ceiling(self):
        local = crop_local_scene(floor_mesh(), (2.0, 2.0, 1.0), 2.0, 0.25)
        tr = CageTransform.for_cage((2.0, 2.0, 1.0), 2.0)
        scene_only = tr.world_to_cage(local.cropped_mesh.vertices)
        enc = encode_scene(make_basis(512, 8), scene_only, tr)
        assert not enc.source_flags.any()
        assert enc.scene_bps[:, 2].max() < -0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            encode_scene(make_basis(8, 0), np.zeros((0, 3)))


class TestEncodeBody:
    def setup_method(self):
        rng = np.random.default_rng(9)
        self.b = make_basis(256, 9)
        self.enc = encode_scene(self.b, rng.uniform(-1, 1, (600, 3)))
        self.body = rng.uniform(-0.4, 0.4, (100, 3))

    def test_matches_loop(self):
        np.testing.assert_array_equal(encode_body(self.enc, self.body), loop_nearest(self.body, self.enc.scene_bps)[1])
        np.testing.assert_array_equal(nearest_body_vertex(self.enc.scene_bps, self.body),
                                      loop_nearest(self.body, self.enc.scene_bps)[0])

    def test_contact_entry_zero(self):
        body = self.body.copy()
        body[17] = self.enc.scene_bps[40]
        assert encode_body(self.enc, body)[40] == 0.0

    def test_translation_lipschitz(self):
        a = encode_body(self.enc, self.body)
        c = encode_body(self.enc, self.body + [0, 0, 0.1])
        assert np.abs(a - c).max() <= 0.1 + 1e-12

    def test_dimension(self):
        assert encode_body(self.enc, self.body).shape == (self.b.n,)

    def test_empty(self):
        with pytest.raises(ValueError):
            encode_body(self.enc, np.zeros((0, 3)))

    def test_rigid_rotation_invariance(self):
        rng = np.random.default_rng(10)
        scene = rng.uniform(-1, 1, (600, 3))
        R = rot_z(1.1) @ np.array([[1, 0, 0], [0, math.cos(0.4), -math.sin(0.4)], [0, math.sin(0.4), math.cos(0.4)]])
        # rotate the basis as well so index alignment is preserved
        b = make_basis(256, 10)
        e1 = encode_scene(b, scene)
        b2 = type(b)(b.points @ R.T, b.seed)
        e2 = encode_scene(b2, scene @ R.T)
        np.testing.assert_allclose(e1.scene_feature, e2.scene_feature, atol=1e-6)
        np.testing.assert_allclose(encode_body(e1, self.body), encode_body(e2, self.body @ R.T), atol=1e-6)


class TestFeatureFromBody:
    def test_values_match_encode_body(self):
        rng = np.random.default_rng(11)
        bps = rng.uniform(-1, 1, (64, 3))
        body = rng.uniform(-0.5, 0.5, (40, 3))
        f = feature_from_body(torch.tensor(body), bps)
        idx, dist = loop_nearest(body, bps)
        np.testing.assert_array_equal(nearest_body_vertex(bps, body), idx)
        np.testing.assert_allclose(f.numpy(), dist, rtol=0, atol=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(12)
        bps = rng.uniform(-1, 1, (32, 3))
        body = rng.uniform(-0.5, 0.5, (20, 3))
        w = rng.normal(size=32)

        def f(x):
            return float((feature_from_body(torch.tensor(x.reshape(20, 3)), bps).numpy() * w).sum())

        x = torch.tensor(body, requires_grad=True)
        (feature_from_body(x, bps) * torch.tensor(w)).sum().backward()
        fd = central_diff(f, body.ravel(), 1e-6).reshape(20, 3)
        err = np.linalg.norm(x.grad.numpy() - fd) / np.linalg.norm(fd)
        assert err < 1e-4

    def test_single_vertex_direction(self):
        bps = np.random.default_rng(13).uniform(-1, 1, (16, 3))
        v = np.array([[0.1, 0.2, -0.3]])
        for i in range(16):
            x = torch.tensor(v, requires_grad=True)
            feature_from_body(x, bps)[i].backward()
            want = (v[0] - bps[i]) / np.linalg.norm(v[0] - bps[i])
            np.testing.assert_allclose(x.grad.numpy()[0], want, atol=1e-12)

    def test_gradient_norm_bounded(self):
        rng = np.random.default_rng(14)
        bps = rng.uniform(-1, 1, (50, 3))
        x = torch.tensor(rng.uniform(-1, 1, (30, 3)), requires_grad=True)
        f = feature_from_body(x, bps)
        for i in range(50):
            (g,) = torch.autograd.grad(f[i], x, retain_graph=True)
            assert float(g.norm()) <= 1.0 + 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            feature_from_body(torch.zeros(0, 3, dtype=torch.float64), np.zeros((4, 3)))


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        v = np.random.default_rng(15).uniform(0, 2, 1024)
        save_feature(v, tmp_path / "f.bin")
        assert np.abs(load_feature(tmp_path / "f.bin") - v).max() < 1e-6
        assert (tmp_path / "f.bin").stat().st_size == 4 + 4 * 1024

    def test_length_mismatch(self, tmp_path):
        save_feature(np.ones(10), tmp_path / "f.bin")
        data = (tmp_path / "f.bin").read_bytes()
        (tmp_path / "g.bin").write_bytes(data[:-4])
        with pytest.raises(ValueError):
            load_feature(tmp_path / "g.bin")
