import numpy as np
import pytest

from pvnet import geometry as G
from pvnet.geometry import Mesh, OffParseError, PointCloud
from pvnet.synthetic import box, torus
from pvnet.tensor import DomainError

TETRA = """OFF
# a comment
4 4 6
0 0 0
1 0 0
0 1 0
0 0 1
3 0 1 2
3 0 1 3
3 0 2 3
3 1 2 3
"""


class TestOff:
    def test_tetrahedron(self):
        mesh = G.parse_off(TETRA)
        assert mesh.vertices.shape == (4, 3)
        assert mesh.faces.shape == (4, 3)

    def test_quad_fans_into_two_triangles(self):
        mesh = G.parse_off("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_index_equal_to_vertex_count_rejected(self):
        with pytest.raises(OffParseError) as err:
            G.parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n")
        assert err.value.line == 6

    def test_fused_header(self):
        mesh = G.parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        assert len(mesh.faces) == 1

    def test_bad_header(self):
        with pytest.raises(OffParseError, match="OFF header"):
            G.parse_off("PLY\n")

    def test_truncated(self):
        with pytest.raises(OffParseError, match="truncated"):
            G.parse_off("OFF\n4 2 0\n0 0 0\n1 0 0\n")

    def test_roundtrip(self, tmp_path):
        mesh = G.parse_off(TETRA)
        G.write_off(tmp_path / "t.off", mesh)
        back = G.read_off(tmp_path / "t.off")
        np.testing.assert_array_equal(back.vertices, mesh.vertices)
        np.testing.assert_array_equal(back.faces, mesh.faces)


class TestSampling:
    def test_single_triangle_barycentric(self):
        tri = Mesh([[0, 0, 0], [2, 0, 0], [0, 1, 0.5]], [[0, 1, 2]])
        pts, rows, bary = G.sample_surface(tri, 500, seed=3)
        assert (bary >= 0).all()
        np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(pts, bary @ tri.vertices, atol=1e-12)
        # all points on the triangle's plane
        normal = np.cross(tri.vertices[1] - tri.vertices[0], tri.vertices[2] - tri.vertices[0])
        np.testing.assert_allclose((pts - tri.vertices[0]) @ normal, 0.0, atol=1e-12)

    def test_area_weighting_binomial_bound(self):
        # areas 1 and 3: expected 0.75 on the larger, 3 sigma of Binomial(10000, .75) is about 0.013
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]], [[0, 1, 2], [3, 4, 5]])
        areas = mesh.face_areas()
        assert areas[1] / areas[0] == pytest.approx(3.0)
        pts, _, _ = G.sample_surface(mesh, 10000, seed=0)
        frac = np.mean(pts[:, 0] >= 5 - 1e-12)
        assert 0.73 <= frac <= 0.77

    def test_deterministic(self):
        mesh = torus()
        a = G.sample_points(mesh, 1024, seed=11).points
        b = G.sample_points(mesh, 1024, seed=11).points
        np.testing.assert_array_equal(a, b)

    def test_face_order_does_not_matter(self):
        mesh = box(2)
        shuffled = Mesh(mesh.vertices, mesh.faces[np.random.default_rng(0).permutation(len(mesh.faces))])
        np.testing.assert_array_equal(G.sample_points(mesh, 64, 5).points, G.sample_points(shuffled, 64, 5).points)

    def test_normalized_unit_radius(self):
        pts = G.sample_points(torus(), 1024, seed=0).points
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0, abs=1e-6)

    def test_normalize_idempotent(self):
        pts = np.random.default_rng(1).standard_normal((50, 3)) * 4 + 2
        once = G.normalize(pts)
        np.testing.assert_allclose(G.normalize(once), once, atol=1e-12)

    def test_no_faces(self):
        with pytest.raises(DomainError):
            G.sample_surface(Mesh(np.zeros((3, 3)), np.zeros((0, 3))), 4, 0)


class TestSubsample:
    cloud = PointCloud(np.random.default_rng(0).standard_normal((1024, 3)))

    def test_full_size_is_same_set(self):
        sub = G.subsample_points(self.cloud, 1024, seed=0)
        np.testing.assert_array_equal(sub.points, self.cloud.points)

    def test_distinct_original_points(self):
        sub = G.subsample_points(self.cloud, 128, seed=4).points
        assert len(np.unique(sub, axis=0)) == 128
        orig = {tuple(p) for p in self.cloud.points}
        assert all(tuple(p) in orig for p in sub)

    def test_seeds_differ(self):
        a = G.subsample_points(self.cloud, 128, seed=1).points
        b = G.subsample_points(self.cloud, 128, seed=2).points
        assert not np.array_equal(a, b)

    def test_no_rescale(self):
        sub = G.subsample_points(self.cloud, 10, seed=0).points
        assert np.linalg.norm(sub, axis=1).max() < np.linalg.norm(self.cloud.points, axis=1).max() + 1e-12

    @pytest.mark.parametrize("m", [0, 1025])
    def test_bounds(self, m):
        with pytest.raises(DomainError):
            G.subsample_points(self.cloud, m, 0)


class TestCameras:
    @pytest.mark.parametrize("count,az", [(12, np.arange(0, 360, 30)), (4, [0, 90, 180, 270]), (1, [0])])
    def test_ring(self, count, az):
        ring = G.camera_ring(count)
        np.testing.assert_allclose(ring[:, 0], az)
        np.testing.assert_allclose(ring[:, 1], 30.0)

    def test_frame_orthonormal(self):
        f = np.stack(G.camera_frame(37.0, 30.0))
        np.testing.assert_allclose(f @ f.T, np.eye(3), atol=1e-12)


class TestRender:
    def test_cube_front_view(self):
        # the cube [-1,1]^3 normalized has corners at radius 1, so its half-width is 1/sqrt(3)
        cube = G.normalize_mesh(box(2))
        img = G.render_view(cube, 0.0, 0.0, 64, 64)
        hit = img > 0
        rows, cols = np.flatnonzero(hit.any(axis=1)), np.flatnonzero(hit.any(axis=0))
        # axis-aligned filled square
        assert hit[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].all()
        assert hit.sum() == len(rows) * len(cols)
        assert abs((rows[0] + rows[-1]) / 2 - 31.5) <= 0.5 and abs((cols[0] + cols[-1]) / 2 - 31.5) <= 0.5
        expected_side = 2 * 0.8 / np.sqrt(3) * 32
        assert abs(len(cols) - expected_side) <= 1.0
        assert 0.2 <= hit.mean() <= 0.6
        # front face at distance 2 - 1/sqrt(3)
        np.testing.assert_allclose(img[hit], 1 / (2 - 1 / np.sqrt(3)), rtol=1e-5)

    def test_values_in_range(self):
        views = G.render_views(G.normalize_mesh(torus()), G.camera_ring(4), 32, 32).views
        assert views.shape == (4, 32, 32)
        nz = views[views > 0]
        assert nz.min() >= 1 / 3 - 1e-6 and nz.max() <= 1.0

    def test_same_pose_twice(self):
        mesh = G.normalize_mesh(torus())
        views = G.render_views(mesh, [[15, 30], [15, 30]], 32, 32).views
        np.testing.assert_array_equal(views[0], views[1])

    def test_rotation_shifts_ring(self):
        rng = np.random.default_rng(0)
        mesh = G.normalize_mesh(Mesh(torus().vertices * [1.0, 0.7, 1.2] + rng.normal(0, 0.03, (288, 3)),
                                     torus().faces))
        ring = G.camera_ring(12)
        base = G.render_views(mesh, ring, 48, 48).views
        turned = G.render_views(G.rotate_z(mesh, 30.0), ring, 48, 48).views
        # rotating the object by +30 degrees moves what camera i saw into camera i+1
        np.testing.assert_allclose(turned[1:], base[:-1], atol=1e-5)
        np.testing.assert_allclose(turned[0], base[-1], atol=1e-5)

    def test_min_resolution(self):
        with pytest.raises(DomainError):
            G.render_views(G.normalize_mesh(torus()), G.camera_ring(2), 4, 64)
