import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from proxsynth.mesh import (CageTransform, EmptyRegionError, MeshFormatError, MeshValidationError, TriMesh,
                            cage_wall_points, crop_local_scene, load_mesh, save_mesh, to_unit_sphere)

from conftest import floor_mesh


def random_mesh(rng, nv=100, nf=150, quality=False):
    v = rng.uniform(-3, 3, size=(nv, 3))
    f = rng.integers(0, nv, size=(nf, 3))
    return TriMesh(v, f, rng.uniform(0, 1, nv) if quality else None)


class TestTriMesh:
    def test_face_index_out_of_range(self):
        with pytest.raises(MeshValidationError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 3]])

    def test_non_finite_vertices(self):
        with pytest.raises(MeshValidationError):
            TriMesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_quality_length(self):
        with pytest.raises(MeshValidationError):
            TriMesh(np.zeros((3, 3)), [[0, 1, 2]], quality=[0.0, 1.0])


class TestObj:
    def test_minimal_file(self, tmp_path):
        p = tmp_path / "tri.obj"
        p.write_text("# triangle\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        m = load_mesh(p)
        assert m.n_vertices == 3 and len(m.faces) == 1
        np.testing.assert_array_equal(m.faces, [[0, 1, 2]])

    def test_face_index_beyond_vertices(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
        with pytest.raises(MeshValidationError):
            load_mesh(p)

    def test_parse_error_has_line_number(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 zero 0\n")
        with pytest.raises(MeshFormatError, match=":2:"):
            load_mesh(p)

    def test_quad_is_fan_triangulated(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
        np.testing.assert_array_equal(load_mesh(p).faces, [[0, 1, 2], [0, 2, 3]])

    def test_round_trip(self, tmp_path):
        m = random_mesh(np.random.default_rng(0))
        save_mesh(m, tmp_path / "m.obj")
        r = load_mesh(tmp_path / "m.obj")
        assert np.abs(r.vertices - m.vertices).max() < 1e-6
        np.testing.assert_array_equal(r.faces, m.faces)


class TestPly:
    def test_round_trip_with_quality(self, tmp_path):
        m = random_mesh(np.random.default_rng(1), quality=True)
        save_mesh(m, tmp_path / "m.ply")
        r = load_mesh(tmp_path / "m.ply")
        assert np.abs(r.vertices - m.vertices).max() < 1e-6
        assert np.abs(r.quality - m.quality).max() < 1e-6
        np.testing.assert_array_equal(r.faces, m.faces)

    def test_point_cloud(self, tmp_path):
        v = np.random.default_rng(2).normal(size=(10, 3))
        save_mesh(TriMesh(v, np.zeros((0, 3), int)), tmp_path / "p.ply")
        r = load_mesh(tmp_path / "p.ply")
        assert len(r.faces) == 0 and np.abs(r.vertices - v).max() < 1e-6

    def test_ascii_rejected(self, tmp_path):
        p = tmp_path / "a.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n")
        with pytest.raises(MeshFormatError):
            load_mesh(p)

    def test_truncated(self, tmp_path):
        m = random_mesh(np.random.default_rng(3))
        save_mesh(m, tmp_path / "m.ply")
        data = (tmp_path / "m.ply").read_bytes()
        (tmp_path / "t.ply").write_bytes(data[:-100])
        with pytest.raises(MeshFormatError):
            load_mesh(tmp_path / "t.ply")

    def test_unknown_extension(self, tmp_path):
        with pytest.raises(MeshFormatError):
            load_mesh(tmp_path / "m.stl")


class TestCage:
    def test_wall_point_count(self):
        # 9 x 9 grid on ceiling and four walls at 0.25 m over a 2 m edge
        assert len(cage_wall_points(2.0, 0.25)) == 5 * 9 * 9

    def test_floor_scene_crop_count(self):
        local = crop_local_scene(floor_mesh(), (2.0, 2.0, 1.0), 2.0, 0.25)
        assert len(local.cage_points) == 405

    def test_cage_points_on_faces(self):
        local = crop_local_scene(floor_mesh(), (2.0, 2.0, 1.0), 2.0, 0.25)
        rel = np.abs(local.cage_points - np.array([2.0, 2.0, 1.0]))
        np.testing.assert_allclose(rel.max(axis=1), 1.0, atol=1e-12)
        # the floor face carries no cage points: anything at floor height lies on a wall edge
        low = rel[:, 2] > 1.0 - 1e-12
        low &= local.cage_points[:, 2] < 1.0
        assert np.all(np.maximum(rel[low, 0], rel[low, 1]) > 1.0 - 1e-12)

    def test_cropped_vertices_inside_box(self):
        local = crop_local_scene(floor_mesh(pitch=0.1), (1.3, 2.2, 1.0), 2.0)
        rel = np.abs(local.cropped_mesh.vertices - np.array([1.3, 2.2, 1.0]))
        assert np.all(rel <= 1.0 + 1e-9)

    def test_boundary_vertex_included(self):
        m = TriMesh([[1.0, 0.0, 0.0], [5.0, 5.0, 5.0], [6.0, 5.0, 5.0]], [[0, 1, 2]])
        local = crop_local_scene(m, (0.0, 0.0, 0.0), 2.0)
        assert local.cropped_mesh.n_vertices == 1
        assert len(local.cropped_mesh.faces) == 0  # straddling face dropped

    def test_empty_region(self):
        with pytest.raises(EmptyRegionError):
            crop_local_scene(floor_mesh(), (2.0, 2.0, 5.0), 2.0)

    def test_crop_idempotent(self):
        center = (1.7, 2.1, 1.0)
        a = crop_local_scene(floor_mesh(pitch=0.1), center, 2.0)
        b = crop_local_scene(a.cropped_mesh, center, 2.0)
        np.testing.assert_array_equal(a.cropped_mesh.vertices, b.cropped_mesh.vertices)
        np.testing.assert_array_equal(a.cropped_mesh.faces, b.cropped_mesh.faces)

    def test_corner_maps_to_unit_norm(self):
        tr = CageTransform.for_cage((0.5, -1.0, 1.0), 2.0)
        corner = np.array([1.5, 0.0, 2.0])
        assert abs(np.linalg.norm(tr.world_to_sphere(corner)) - 1.0) < 1e-9
        np.testing.assert_allclose(tr.world_to_sphere(np.array([0.5, -1.0, 1.0])), 0.0, atol=1e-15)

    def test_normalized_points_in_ball(self):
        local = crop_local_scene(floor_mesh(pitch=0.1), (2.0, 2.0, 1.0), 2.0)
        u, _ = to_unit_sphere(local)
        assert np.linalg.norm(u, axis=1).max() <= 1 + 1e-9

    def test_round_trip_many_points(self):
        rng = np.random.default_rng(4)
        tr = CageTransform.for_cage((1.0, 2.0, 1.0), 2.0, world_yaw=0.7).with_augmentation(1.3, [0.01, -0.02, 0.03])
        p = rng.uniform(-5, 5, size=(10_000, 3))
        assert np.abs(tr.sphere_to_world(tr.world_to_sphere(p)) - p).max() < 1e-6
        assert np.abs(tr.cage_to_world(tr.world_to_cage(p)) - p).max() < 1e-6

    def test_array_round_trip(self):
        tr = CageTransform.for_cage((1.0, 2.0, 1.0), 2.0, world_yaw=0.7).with_augmentation(1.3, [0.01, -0.02, 0.03])
        tr2 = CageTransform.from_array(tr.to_array())
        p = np.random.default_rng(5).normal(size=(5, 3))
        np.testing.assert_array_equal(tr.world_to_sphere(p), tr2.world_to_sphere(p))

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 2.9), st.floats(0, 2 * math.pi))
    def test_round_trip_property(self, x, y, z, yaw):
        tr = CageTransform.for_cage((x, y, 1.0), 2.0, world_yaw=yaw)
        p = np.array([[x + 0.3, y - 0.2, z]])
        assert np.abs(tr.cage_to_world(tr.world_to_cage(p)) - p).max() < 1e-9
