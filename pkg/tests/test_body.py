import math
from collections import Counter

import numpy as np
import pytest
import torch

from proxsynth.body import (J, JOINT_LIMITS, N_JOINTS, N_PARAMS, SCALE_LIMITS, BodyParams, clamp_params, mean_pose,
                            param_prior, param_prior_grad, sample_pose)
from proxsynth.mesh import load_mesh

from conftest import central_diff, rel_err


def random_params(rng, margin=0.05):
    a = rng.uniform(JOINT_LIMITS[:, 0] + margin, JOINT_LIMITS[:, 1] - margin)
    s = rng.uniform(SCALE_LIMITS[0] + margin, SCALE_LIMITS[1] - margin, 3)
    return BodyParams(rng.normal(size=3), rng.uniform(-math.pi, math.pi), a, s)


class TestTemplate:
    def test_counts(self, body_model):
        t = body_model.template()
        assert t.vertices.shape == (642, 3)
        assert len(t.faces) == 1232
        assert body_model.feet_mask.sum() > 0

    def test_watertight(self, body_model):
        edges = Counter()
        for f in body_model.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                edges[(min(a, b), max(a, b))] += 1
        assert set(edges.values()) == {2}

    def test_consistent_orientation(self, body_model):
        directed = Counter()
        for f in body_model.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                directed[(a, b)] += 1
        assert max(directed.values()) == 1

    def test_feet_on_soles_only(self, body_model):
        names = [body_model.segments[s].name for s in body_model.segment_ids[body_model.feet_mask]]
        assert set(names) == {"foot_r", "foot_l"}

    def test_identity_pose(self, body_model):
        p = BodyParams(translation=[0.3, -0.2, 1.5])
        v = body_model.vertices(p)
        pel = body_model.segment_ids == body_model.segment_index["pelvis"]
        np.testing.assert_allclose(v[pel].mean(0), p.translation, atol=1e-12)
        sole = v[body_model.feet_mask, 2].min()
        assert sole == pytest.approx(1.5 - body_model.leg_length(), abs=1e-12)

    def test_topology_fixed(self, body_model):
        rng = np.random.default_rng(0)
        for _ in range(5):
            m = body_model.forward(random_params(rng))
            assert m.vertices.shape == (642, 3)
            np.testing.assert_array_equal(m.faces, body_model.faces)

    def test_save_template_sidecar(self, body_model, tmp_path):
        side = body_model.save_template(tmp_path / "body.obj")
        mesh = load_mesh(tmp_path / "body.obj")
        assert mesh.n_vertices == 642
        lines = side.read_text().splitlines()
        feet = [ln for ln in lines if ln.startswith("feet ")]
        np.testing.assert_array_equal(np.array(feet[0].split()[1:], int), np.nonzero(body_model.feet_mask)[0])
        listed = sorted(int(i) for ln in lines if ln.startswith("segment ") for i in ln.split()[2:])
        assert listed == list(range(642))


class TestForward:
    def test_translation_shift(self, body_model):
        p = random_params(np.random.default_rng(1))
        a = body_model.vertices(p)
        b = body_model.vertices(p.replace(translation=p.translation + [1.0, 0, 0]))
        np.testing.assert_allclose(b - a, np.tile([1.0, 0, 0], (642, 1)), atol=1e-12)

    def test_yaw_equivariance(self, body_model):
        p = random_params(np.random.default_rng(2))
        phi = 0.9
        a = body_model.vertices(p) - p.translation
        b = body_model.vertices(p.replace(yaw=p.yaw + phi)) - p.translation
        c, s = math.cos(phi), math.sin(phi)
        np.testing.assert_allclose(b, a @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T, atol=1e-9)

    def test_jacobian_finite_difference(self, body_model):
        rng = np.random.default_rng(3)
        vec = random_params(rng).to_vector()
        sel = rng.choice(642, 20, replace=False)
        f = lambda x: body_model.forward_torch(x)[sel].reshape(-1)
        jac = torch.autograd.functional.jacobian(f, torch.tensor(vec)).numpy()
        h = 1e-6
        fd = np.zeros_like(jac)
        for i in range(N_PARAMS):
            e = np.zeros(N_PARAMS)
            e[i] = h
            fd[:, i] = (f(torch.tensor(vec + e)) - f(torch.tensor(vec - e))).numpy() / (2 * h)
        assert rel_err(jac, fd) < 1e-4

    def test_out_of_range_clamped(self, body_model):
        a = np.zeros(N_JOINTS)
        a[J["knee_r"]] = -1.0
        with pytest.warns(RuntimeWarning):
            m = body_model.forward(BodyParams(joint_angles=a))
        assert m.clamped
        np.testing.assert_array_equal(m.vertices, body_model.vertices(BodyParams()))

    def test_clamp_params(self):
        v = BodyParams(shape_scale=[2.0, 1.0, 1.0]).to_vector()
        out, clamped = clamp_params(v)
        assert clamped and out[-3] == SCALE_LIMITS[1]

    def test_vector_round_trip(self):
        p = random_params(np.random.default_rng(4))
        q = BodyParams.from_vector(p.to_vector())
        np.testing.assert_array_equal(q.to_vector(), p.to_vector())

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            BodyParams(shape_scale=[1.0, 0.0, 1.0])


class TestPrior:
    def test_rest_zero(self):
        assert param_prior(BodyParams()) == 0.0

    def test_quadratic_in_angles(self):
        p = random_params(np.random.default_rng(5)).replace(shape_scale=np.ones(3))
        q = p.replace(joint_angles=2 * p.joint_angles)
        assert param_prior(q) == pytest.approx(4 * param_prior(p), rel=1e-12)

    def test_gradient(self):
        p = random_params(np.random.default_rng(6))
        fd = central_diff(lambda x: param_prior(BodyParams.from_vector(x)), p.to_vector(), 1e-5)
        assert rel_err(param_prior_grad(p), fd) < 1e-6


class TestSampling:
    def test_deterministic(self):
        for cat in ("standing", "sitting", "lying"):
            np.testing.assert_array_equal(sample_pose(cat, 9).to_vector(), sample_pose(cat, 9).to_vector())

    def test_standing_soles_on_ground(self, body_model):
        for seed in range(25):
            v = body_model.vertices(sample_pose("standing", seed))
            assert v[:, 2].min() >= 0.0
            assert v[body_model.feet_mask, 2].max() <= 0.02

    def test_sitting_pelvis_height(self):
        for seed in range(25):
            z = sample_pose("sitting", seed).translation[2]
            assert 0.40 <= z <= 0.55

    def test_lying_on_ground(self, body_model):
        v = body_model.vertices(sample_pose("lying", 3))
        assert 0.0 <= v[:, 2].min() <= 0.01
        assert np.ptp(v[:, 2]) < 0.6

    def test_within_limits(self):
        for cat in ("standing", "sitting", "lying"):
            for seed in range(5):
                a = sample_pose(cat, seed).joint_angles
                assert np.all(a >= JOINT_LIMITS[:, 0]) and np.all(a <= JOINT_LIMITS[:, 1])
            a = mean_pose(cat)
            assert np.all(a >= JOINT_LIMITS[:, 0]) and np.all(a <= JOINT_LIMITS[:, 1])

    def test_unknown_category(self):
        with pytest.raises(ValueError):
            sample_pose("kneeling", 0)
        with pytest.raises(ValueError):
            mean_pose("kneeling")
