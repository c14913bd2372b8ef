"""Mesh loading, surface sampling and rigid transforms."""

import math

import numpy as np
import pytest

from scenehull import geometry
from scenehull.geometry import (
    EmptyMeshError,
    MeshFormatError,
    PointCloud,
    TriangleMesh,
    area_weighted_sample,
    load_mesh,
    load_points,
    poisson_disk_sample,
    poisson_radius,
    rotate_z,
    save_points,
    scale,
    surface_area,
    translate,
)
from scenehull.toydata import icosphere

CUBE_OFF = """OFF
8 12 0
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
3 0 2 1
3 0 3 2
3 4 5 6
3 4 6 7
3 0 1 5
3 0 5 4
3 1 2 6
3 1 6 5
3 2 3 7
3 2 7 6
3 3 0 4
3 3 4 7
"""


def unit_square_mesh():
    verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(verts, faces)


class TestLoadMesh:
    def test_unit_cube(self, tmp_path):
        path = tmp_path / "cube.off"
        path.write_text(CUBE_OFF)
        mesh = load_mesh(path)
        assert mesh.num_vertices == 8
        assert mesh.num_faces == 12
        # vertex order preserved
        np.testing.assert_array_equal(mesh.vertices[1], [1, 0, 0])

    def test_face_index_out_of_range(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n")
        with pytest.raises(MeshFormatError, match="out of range"):
            load_mesh(path)

    def test_degenerate_face_dropped(self, tmp_path):
        # cube plus one zero-area face (repeated vertex)
        path = tmp_path / "degen.off"
        text = CUBE_OFF.replace("8 12 0", "8 13 0") + "3 0 0 1\n"
        path.write_text(text)
        mesh = load_mesh(path)
        assert mesh.num_faces == 12

    def test_all_faces_degenerate(self, tmp_path):
        path = tmp_path / "flat.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n0 0 0\n0 0 0\n3 0 1 2\n")
        with pytest.raises(EmptyMeshError):
            load_mesh(path)

    def test_glued_header(self, tmp_path):
        path = tmp_path / "glued.off"
        path.write_text("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        mesh = load_mesh(path)
        assert mesh.num_faces == 1

    def test_not_off(self, tmp_path):
        path = tmp_path / "nope.off"
        path.write_text("PLY\n")
        with pytest.raises(MeshFormatError, match="line 1"):
            load_mesh(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.off"
        path.write_text("OFF\n4 2 0\n0 0 0\n1 0 0\n")
        with pytest.raises(MeshFormatError, match="truncated"):
            load_mesh(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mesh(tmp_path / "absent.off")


class TestSurfaceArea:
    def test_unit_square(self):
        assert surface_area(unit_square_mesh()) == pytest.approx(1.0, abs=1e-12)

    def test_unit_cube(self, tmp_path):
        path = tmp_path / "cube.off"
        path.write_text(CUBE_OFF)
        assert surface_area(load_mesh(path)) == pytest.approx(6.0, abs=1e-12)

    def test_icosphere_matches_sphere(self):
        # independent oracle: sum per-triangle areas from raw vertex math
        mesh = icosphere(3, radius=1.0)
        assert mesh.num_faces == 1280
        total = 0.0
        for i, j, k in mesh.faces:
            a, b, c = mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]
            total += 0.5 * np.linalg.norm(np.cross(b - a, c - a))
        assert surface_area(mesh) == pytest.approx(total, rel=1e-12)
        assert abs(total - 4.0 * math.pi) / (4.0 * math.pi) < 0.01


class TestAreaWeightedSample:
    def test_single_triangle_barycentric(self):
        verts = np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0]], dtype=float)
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
        pc = area_weighted_sample(mesh, 1, np.random.default_rng(0))
        p = pc.positions[0]
        # barycentric coordinates of p w.r.t. the triangle
        u, v = p[0] / 2.0, p[1] / 3.0
        assert u >= 0 and v >= 0 and u + v <= 1.0 + 1e-12
        assert p[2] == 0.0

    def test_area_proportional_split(self):
        # unit square split into 2 equal triangles: ~half the samples in each
        mesh = unit_square_mesh()
        pc = area_weighted_sample(mesh, 10000, np.random.default_rng(1))
        # first triangle is x >= y (below the diagonal)
        frac = np.mean(pc.positions[:, 0] >= pc.positions[:, 1])
        assert abs(frac - 0.5) <= 0.02

    def test_deterministic(self):
        mesh = unit_square_mesh()
        a = area_weighted_sample(mesh, 100, np.random.default_rng(3))
        b = area_weighted_sample(mesh, 100, np.random.default_rng(3))
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_empty_mesh(self):
        mesh = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int))
        with pytest.raises(EmptyMeshError):
            area_weighted_sample(mesh, 5, np.random.default_rng(0))


class TestPoissonDisk:
    def test_single_point(self):
        pc = poisson_disk_sample(unit_square_mesh(), 1, np.random.default_rng(0))
        assert len(pc) == 1
        assert 0.0 <= pc.positions[0, 0] <= 1.0

    def test_count_and_spacing_on_icosphere(self):
        mesh = icosphere(3, radius=1.0)
        n = 512
        pc = poisson_disk_sample(mesh, n, np.random.default_rng(0))
        assert len(pc) == n
        r_max = poisson_radius(surface_area(mesh), n)
        # brute-force all-pairs minimum distance
        diff = pc.positions[:, None, :] - pc.positions[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        assert dist.min() >= 0.5 * r_max

    def test_deterministic(self):
        mesh = unit_square_mesh()
        a = poisson_disk_sample(mesh, 64, np.random.default_rng(9))
        b = poisson_disk_sample(mesh, 64, np.random.default_rng(9))
        np.testing.assert_array_equal(a.positions, b.positions)


class TestTransforms:
    def test_full_turn_is_identity(self):
        rng = np.random.default_rng(0)
        pc = PointCloud(rng.normal(size=(50, 3)))
        out = rotate_z(pc, 2.0 * math.pi)
        assert np.abs(out.positions - pc.positions).max() < 1e-9

    def test_quarter_turn(self):
        pc = PointCloud(np.array([[1.0, 0.0, 0.0]]))
        out = rotate_z(pc, math.pi / 2.0)
        np.testing.assert_allclose(out.positions[0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_rotation_preserves_pairwise_distances(self):
        rng = np.random.default_rng(4)
        pc = PointCloud(rng.normal(size=(40, 3)))
        out = rotate_z(pc, 1.2345)
        # brute-force pairwise comparison
        d_in = np.linalg.norm(pc.positions[:, None] - pc.positions[None, :], axis=-1)
        d_out = np.linalg.norm(out.positions[:, None] - out.positions[None, :], axis=-1)
        assert np.abs(d_in - d_out).max() < 1e-9

    def test_scale_identity(self):
        rng = np.random.default_rng(5)
        pc = PointCloud(rng.normal(size=(20, 3)))
        out = scale(pc, 1.0)
        np.testing.assert_array_equal(out.positions, pc.positions)

    def test_scale_doubles_centroid_distances(self):
        rng = np.random.default_rng(6)
        pc = PointCloud(rng.normal(size=(20, 3)))
        out = scale(pc, 2.0)
        c_in = pc.positions.mean(axis=0)
        c_out = out.positions.mean(axis=0)
        r_in = np.linalg.norm(pc.positions - c_in, axis=1)
        r_out = np.linalg.norm(out.positions - c_out, axis=1)
        assert np.abs(r_out - 2.0 * r_in).max() < 1e-9

    def test_scale_multiplies_pairwise_distances(self):
        rng = np.random.default_rng(8)
        pc = PointCloud(rng.normal(size=(25, 3)))
        out = scale(pc, 0.37)
        d_in = np.linalg.norm(pc.positions[:, None] - pc.positions[None, :], axis=-1)
        d_out = np.linalg.norm(out.positions[:, None] - out.positions[None, :], axis=-1)
        assert np.abs(d_out - 0.37 * d_in).max() < 1e-9

    def test_nonpositive_scale_rejected(self):
        pc = PointCloud(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            scale(pc, 0.0)
        with pytest.raises(ValueError):
            scale(pc, -1.0)

    def test_translate_roundtrip(self):
        rng = np.random.default_rng(7)
        pc = PointCloud(rng.normal(size=(30, 3)))
        v = np.array([0.3, -1.7, 2.2])
        out = translate(translate(pc, v), -v)
        assert np.abs(out.positions - pc.positions).max() < 1e-12

    def test_labels_carried_through(self):
        pc = PointCloud(np.zeros((3, 3)), labels=[1, 2, 3])
        for out in (rotate_z(pc, 0.5), scale(pc, 1.5), translate(pc, [1, 0, 0])):
            np.testing.assert_array_equal(out.labels, [1, 2, 3])


class TestPointCloudType:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))

    def test_rejects_wrong_annotation_length(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), labels=[1])

    def test_point_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        pc = PointCloud(rng.normal(size=(17, 3)), labels=rng.integers(0, 5, 17))
        path = tmp_path / "pts.txt"
        save_points(path, pc)
        back = load_points(path)
        np.testing.assert_array_equal(back.positions, pc.positions)
        np.testing.assert_array_equal(back.labels, pc.labels)

    def test_point_file_without_labels(self, tmp_path):
        pc = PointCloud(np.array([[0.5, 1.25, -3.0]]))
        path = tmp_path / "pts.txt"
        save_points(path, pc)
        back = load_points(path)
        assert back.labels is None
        np.testing.assert_array_equal(back.positions, pc.positions)
