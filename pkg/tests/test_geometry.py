import math

import numpy as np
import pytest
from scipy import stats

import cuboidfit as cf
from cuboidfit.errors import InvalidInputError
from cuboidfit.geometry import FACE_AXES, FACE_SIGNS


def unit_cuboid(hx=(0.5, 0.5, 0.5)):
    return cf.Cuboid.from_halfextents(t=[0, 0, 0], r=[1, 0, 0, 0], half_extents=hx)


def random_cuboid(rng):
    q = rng.normal(size=4)
    return cf.Cuboid.from_halfextents(
        t=rng.normal(scale=0.5, size=3),
        r=q / np.linalg.norm(q),
        half_extents=rng.uniform(0.1, 1.0, size=3),
    )


class TestQuatToRotmat:
    def test_identity(self):
        assert np.allclose(cf.quat_to_rotmat([1, 0, 0, 0]), np.eye(3))

    def test_180_about_z(self):
        assert np.allclose(cf.quat_to_rotmat([0, 0, 0, 1]), np.diag([-1, -1, 1]))

    def test_90_about_z(self):
        r = cf.quat_to_rotmat([math.sqrt(0.5), 0, 0, math.sqrt(0.5)])
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(r, expected, atol=1e-15)

    def test_orthonormal_det_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.normal(size=4)
            r = cf.quat_to_rotmat(q)
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_sign_flip_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = rng.normal(size=4)
            assert np.array_equal(cf.quat_to_rotmat(q), cf.quat_to_rotmat(-q))

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            cf.quat_to_rotmat([np.nan, 0, 0, 0])


class TestCuboidFaces:
    def test_identity_plus_x(self):
        faces = cf.cuboid_faces(unit_cuboid())
        assert np.allclose(faces[0].world_center, [0.5, 0, 0])
        assert np.allclose(faces[0].world_normal, [1, 0, 0])

    def test_identity_minus_z(self):
        face = cf.cuboid_faces(unit_cuboid())[5]
        assert np.allclose(face.world_center, [0, 0, -0.5])
        assert np.allclose(face.world_normal, [0, 0, -1])

    def test_rotated_90_about_z(self):
        c = cf.Cuboid.from_halfextents(
            t=[0, 0, 0], r=[math.sqrt(0.5), 0, 0, math.sqrt(0.5)],
            half_extents=[0.5, 0.5, 0.5],
        )
        # former +x normal maps to +y
        assert np.allclose(cf.cuboid_faces(c)[0].world_normal, [0, 1, 0], atol=1e-12)

    def test_normals_antipodal_and_orthogonal_tangents(self):
        rng = np.random.default_rng(2)
        faces = cf.cuboid_faces(random_cuboid(rng))
        for a in range(3):
            assert np.allclose(faces[2 * a].world_normal,
                               -faces[2 * a + 1].world_normal)
        for face in faces:
            for tangent in face.tangent_axes:
                assert abs(face.world_normal @ tangent) < 1e-9


class TestPointToCuboidDistance:
    def test_outside_matching_normal(self):
        d2, face, foot = cf.point_to_cuboid_distance([1, 0, 0], [1, 0, 0], unit_cuboid())
        assert abs(d2 - 0.25) < 1e-12
        assert face.index == 0
        assert np.allclose(foot, [0.5, 0, 0])

    def test_on_face_zero(self):
        d2, _, _ = cf.point_to_cuboid_distance([0.5, 0, 0], [1, 0, 0], unit_cuboid())
        assert abs(d2) < 1e-12

    def test_clamped_corner(self):
        d2, face, foot = cf.point_to_cuboid_distance([0.8, 0.8, 0], [0, 1, 0], unit_cuboid())
        assert abs(d2 - 0.18) < 1e-12
        assert face.index == 2
        assert np.allclose(foot, [0.5, 0.5, 0])

    def test_zero_iff_on_selected_face(self):
        # d2 == 0 exactly when the point lies on the matching-normal face
        # rectangle (boundary inclusive).
        rng = np.random.default_rng(3)
        c = unit_cuboid((0.4, 0.3, 0.2))
        on_face = [0.4, 0.3, -0.2]  # corner of the +x face
        d2, _, _ = cf.point_to_cuboid_distance(on_face, [1, 0, 0], c)
        assert d2 == 0.0
        for _ in range(200):
            p = rng.normal(scale=0.5, size=3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d2, face, _ = cf.point_to_cuboid_distance(p, n, c)
            u = c.rotation.T @ (p - c.t)
            s = c.half_extents
            a, sg = face.axis, face.sign
            on = abs(u[a] - sg * s[a]) < 1e-12 and np.all(
                np.abs(np.delete(u, a)) <= np.delete(s, a) + 1e-12
            )
            assert (d2 < 1e-24) == on

    def test_normal_similar_lower_bounded_by_min_distance(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            c = random_cuboid(rng)
            p = rng.normal(scale=0.8, size=3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d2_ns, _, _ = cf.point_to_cuboid_distance(p, n, c)
            d2_min, _, _ = cf.min_distance_point_to_cuboid(p, c)
            assert d2_ns >= d2_min - 1e-12

    def test_rigid_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = random_cuboid(rng)
            p = rng.normal(size=3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            d2, _, _ = cf.point_to_cuboid_distance(p, n, c)

            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            rot = cf.quat_to_rotmat(q)
            v = rng.normal(size=3)
            # rotate the composed frame: quaternion product q * c.r
            w1, x1, y1, z1 = q
            w2, x2, y2, z2 = c.r
            q_new = [
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 + y1 * w2 + z1 * x2 - x1 * z2,
                w1 * z2 + z1 * w2 + x1 * y2 - y1 * x2,
            ]
            c2 = cf.Cuboid(t=rot @ c.t + v, r=q_new, s_log=c.s_log)
            d2_moved, _, _ = cf.point_to_cuboid_distance(rot @ p + v, rot @ n, c2)
            assert abs(d2 - d2_moved) < 1e-9

    def test_sampled_distance_zero_on_matching_face(self):
        # moving along the face normal does not move the in-face foot
        rng = np.random.default_rng(6)
        vals = [
            cf.point_to_cuboid_distance([0.5, 0, 0], [1, 0, 0], unit_cuboid(),
                                        sigma_s=0.05, rng=rng)[0]
            for _ in range(1000)
        ]
        assert max(vals) == 0.0

    def test_sampled_distance_matches_monte_carlo_oracle(self):
        # independent brute-force oracle sharing the same eta draws
        c = unit_cuboid((0.4, 0.3, 0.2))
        p = np.array([0.55, 0.1, 0.05])
        n = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
        draws = 100_000
        etas = np.random.default_rng(123).normal(0.0, 0.05, size=draws)

        # oracle: clamp in the axis frame, fully rederived here
        dots = [n[0], -n[0], n[1], -n[1], n[2], -n[2]]
        face = int(np.argmax(dots))
        axis, sign = face // 2, 1.0 - 2.0 * (face % 2)
        s = np.array([0.4, 0.3, 0.2])
        total = 0.0
        for eta in etas:
            probe = p + eta * n
            foot = np.minimum(np.maximum(probe, -s), s)
            foot[axis] = sign * s[axis]
            total += ((foot - p) ** 2).sum()
        oracle_mean = total / draws

        rng = np.random.default_rng(123)
        vals = [
            cf.point_to_cuboid_distance(p, n, c, sigma_s=0.05, rng=rng)[0]
            for _ in range(draws)
        ]
        assert abs(np.mean(vals) - oracle_mean) < 1e-12


class TestMinDistance:
    def test_outside(self):
        d2, _, _ = cf.min_distance_point_to_cuboid([1, 0, 0], unit_cuboid())
        assert abs(d2 - 0.25) < 1e-12

    def test_interior_tie_breaks_to_plus_x(self):
        d2, face, _ = cf.min_distance_point_to_cuboid([0, 0, 0], unit_cuboid())
        assert abs(d2 - 0.25) < 1e-12
        assert face.index == 0

    def test_corner_clamp(self):
        d2, _, foot = cf.min_distance_point_to_cuboid([0.6, 0.6, 0.6], unit_cuboid())
        assert abs(d2 - 0.03) < 1e-12
        assert np.allclose(foot, [0.5, 0.5, 0.5])


class TestSurfaceSampling:
    def test_unit_cube_face_counts_within_3_sigma(self):
        c = unit_cuboid()
        rng = np.random.default_rng(7)
        pts, nrm = cf.sample_cuboid_surface(c, 600_000, rng)
        # classify samples by face from their normals
        counts = np.zeros(6, dtype=int)
        for f, face in enumerate(cf.cuboid_faces(c)):
            counts[f] = int((nrm @ face.world_normal > 0.99).sum())
        expected = 100_000
        sigma = math.sqrt(600_000 * (1 / 6) * (5 / 6))
        assert np.all(np.abs(counts - expected) < 3 * sigma)

    def test_chi_square_on_face_histogram(self):
        c = cf.Cuboid.from_halfextents(t=[0, 0, 0], r=[1, 0, 0, 0],
                                       half_extents=[0.5, 0.3, 0.2])
        rng = np.random.default_rng(8)
        pts, nrm = cf.sample_cuboid_surface(c, 100_000, rng)
        faces = cf.cuboid_faces(c)
        counts = np.array([(nrm @ f.world_normal > 0.99).sum() for f in faces])
        areas = np.array([4 * f.half_extents_2d[0] * f.half_extents_2d[1]
                          for f in faces])
        expected = 100_000 * areas / areas.sum()
        _, pvalue = stats.chisquare(counts, expected)
        assert pvalue > 0.001

    def test_thin_cuboid_area_ratio(self):
        c = unit_cuboid((0.5, 0.5, 1e-4))
        rng = np.random.default_rng(9)
        _, nrm = cf.sample_cuboid_surface(c, 50_000, rng)
        frac_z = float((np.abs(nrm[:, 2]) > 0.99).mean())
        assert abs(frac_z - 2.0 / (2.0 + 8e-4)) < 0.01

    def test_seeded_replay(self):
        c = unit_cuboid()
        p1, n1 = cf.sample_cuboid_surface(c, 1, np.random.default_rng(10))
        p2, n2 = cf.sample_cuboid_surface(c, 1, np.random.default_rng(10))
        assert np.array_equal(p1, p2)
        assert np.array_equal(n1, n2)

    def test_samples_lie_on_surface(self):
        rng = np.random.default_rng(11)
        c = random_cuboid(rng)
        pts, _ = cf.sample_cuboid_surface(c, 500, rng)
        for p in pts:
            d2, _, _ = cf.min_distance_point_to_cuboid(p, c)
            assert d2 < 1e-18


class TestCuboidMesh:
    def test_identity_vertices(self):
        vertices, triangles = cf.cuboid_mesh(unit_cuboid())
        expected = {
            (sx * 0.5, sy * 0.5, sz * 0.5)
            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)
        }
        assert {tuple(v) for v in np.round(vertices, 12)} == expected
        assert triangles.shape == (12, 3)

    def test_translation(self):
        c0 = unit_cuboid()
        c1 = cf.Cuboid.from_halfextents(t=[1, 0, 0], r=[1, 0, 0, 0],
                                        half_extents=[0.5, 0.5, 0.5])
        v0, _ = cf.cuboid_mesh(c0)
        v1, _ = cf.cuboid_mesh(c1)
        assert np.allclose(v1, v0 + np.array([1, 0, 0]))

    def test_outward_winding(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            c = random_cuboid(rng)
            vertices, triangles = cf.cuboid_mesh(c)
            faces = cf.cuboid_faces(c)
            for k, tri in enumerate(triangles):
                a, b, d = vertices[tri]
                tri_normal = np.cross(b - a, d - a)
                assert tri_normal @ faces[k // 2].world_normal > 0


class TestEstimateNormals:
    def test_planar_points(self):
        rng = np.random.default_rng(13)
        pts = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 200),
                               np.zeros(200)])
        normals = cf.estimate_normals(pts, k=8)
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)

    def test_sphere_oracle_under_5_degrees(self):
        rng = np.random.default_rng(14)
        raw = rng.normal(size=(2000, 3))
        pts = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        normals = cf.estimate_normals(pts, k=8)
        cosines = np.einsum("ni,ni->n", normals, pts)
        angles = np.degrees(np.arccos(np.clip(np.abs(cosines), -1, 1)))
        assert angles.mean() < 5.0
        # outward flip rule: all point away from the centroid (origin)
        assert np.all(cosines > 0)

    def test_four_coplanar_points(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        normals = cf.estimate_normals(pts, k=3)
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-9)

    def test_unit_norm(self):
        rng = np.random.default_rng(15)
        pts = rng.normal(size=(100, 3))
        normals = cf.estimate_normals(pts, k=8)
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-6)

    def test_requires_enough_points(self):
        with pytest.raises(InvalidInputError):
            cf.estimate_normals(np.zeros((5, 3)), k=8)
        with pytest.raises(InvalidInputError):
            cf.estimate_normals(np.zeros((10, 3)), k=2)


class TestFaceTables:
    def test_face_order_convention(self):
        assert list(FACE_AXES) == [0, 0, 1, 1, 2, 2]
        assert list(FACE_SIGNS) == [1, -1, 1, -1, 1, -1]
