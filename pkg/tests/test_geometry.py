import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from moeloc import geometry as geo
from moeloc.autodiff import Tensor

from helpers import check_grad


def random_rotations(n, rng):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Rotation.from_quat(q).as_matrix()


def random_pose(rng):
    return geo.RigidPose(random_rotations(1, rng)[0], rng.normal(size=3))


INTR = geo.CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


class TestRigidPose:
    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert np.linalg.norm(ident.rotation - np.eye(3)) < 1e-9
            assert np.linalg.norm(ident.translation) < 1e-9

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            geo.RigidPose(np.eye(3) * 1.01, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            geo.RigidPose(r, np.zeros(3))

    def test_compose_matches_sequential_apply(self):
        rng = np.random.default_rng(1)
        a, b = random_pose(rng), random_pose(rng)
        x = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            a.compose(b).apply(x), a.apply(b.apply(x)), atol=1e-12
        )

    def test_camera_center_maps_to_origin(self):
        rng = np.random.default_rng(2)
        p = random_pose(rng)
        np.testing.assert_allclose(p.apply(p.camera_center()), np.zeros(3), atol=1e-12)

    def test_look_at_centers_target(self):
        p = geo.RigidPose.look_at([1.0, -2.0, 0.5], [4.0, 1.0, 0.0])
        px, depth, valid = geo.project(p, INTR, np.array([4.0, 1.0, 0.0]))
        assert valid and depth > 0
        np.testing.assert_allclose(px, [INTR.cx, INTR.cy], atol=1e-9)

    def test_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        q = geo.RigidPose.from_matrix(p.matrix())
        np.testing.assert_allclose(q.rotation, p.rotation)
        np.testing.assert_allclose(q.translation, p.translation)


class TestProject:
    def test_principal_axis_point(self):
        px, depth, valid = geo.project(geo.RigidPose.identity(), INTR, [0.0, 0.0, 1.0])
        assert valid
        np.testing.assert_allclose(px, [64.0, 64.0])
        assert depth == 1.0

    def test_pinhole_arithmetic(self):
        px, depth, valid = geo.project(geo.RigidPose.identity(), INTR, [0.5, 0.0, 1.0])
        assert valid
        np.testing.assert_allclose(px, [114.0, 64.0])
        assert depth == 1.0

    def test_behind_camera_flagged(self):
        _, _, valid = geo.project(geo.RigidPose.identity(), INTR, [0.0, 0.0, -1.0])
        assert not valid

    def test_backproject_round_trip_random_poses(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            pose = random_pose(rng)
            px = rng.uniform([0, 0], [INTR.width, INTR.height])
            depth = rng.uniform(0.5, 50.0)
            point = geo.backproject(px, depth, pose, INTR)
            px2, depth2, valid = geo.project(pose, INTR, point)
            assert valid
            assert np.linalg.norm(px2 - px) < 1e-9
            np.testing.assert_allclose(depth2, depth, rtol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        pose = random_pose(rng)
        pts = rng.normal(size=(50, 3)) * 3
        px_b, z_b, v_b = geo.project(pose, INTR, pts)
        for i in range(50):
            px, z, v = geo.project(pose, INTR, pts[i])
            np.testing.assert_allclose(px_b[i], px, rtol=1e-12)
            np.testing.assert_allclose(z_b[i], z, rtol=1e-12)
            assert v_b[i] == v


class TestReprojectionError:
    def test_backprojected_point_is_exact(self):
        rng = np.random.default_rng(6)
        pose = random_pose(rng)
        px = np.array([30.0, 90.0])
        point = geo.backproject(px, 4.0, pose, INTR)
        err, valid = geo.reprojection_error(geo.Correspondence(px, point), pose, INTR)
        assert valid
        assert err < 1e-10

    def test_constructed_offset(self):
        pose = geo.RigidPose.identity()
        point = geo.backproject(np.array([64.0, 64.0]), 1.0, pose, INTR)
        corr = geo.Correspondence([61.0, 64.0], point)
        err, valid = geo.reprojection_error(corr, pose, INTR)
        assert valid
        np.testing.assert_allclose(err, 3.0, atol=1e-12)

    def test_behind_camera_gets_constant(self):
        pose = geo.RigidPose.identity()
        corr = geo.Correspondence([64.0, 64.0], [0.0, 0.0, -2.0])
        err, valid = geo.reprojection_error(corr, pose, INTR, invalid_error=123.0)
        assert not valid
        assert err == 123.0

    def test_matches_homogeneous_matrix_form(self):
        # Oracle: flat 3x4 projective matrix P = K [R|t] applied to
        # homogeneous points, no shared code with the implementation.
        rng = np.random.default_rng(7)
        total = 0
        for _ in range(100):
            pose = random_pose(rng)
            pts = pose.inverse().apply(
                np.column_stack(
                    [
                        rng.uniform(-2, 2, size=100),
                        rng.uniform(-2, 2, size=100),
                        rng.uniform(0.5, 20, size=100),
                    ]
                )
            )
            obs = rng.uniform([0, 0], [128, 128], size=(100, 2))
            p_mat = INTR.matrix() @ pose.matrix()
            homog = p_mat @ np.column_stack([pts, np.ones(len(pts))]).T
            expected = np.linalg.norm(homog[:2] / homog[2] - obs.T, axis=0)
            got, valid = geo.reprojection_errors(pts, obs, pose, INTR)
            assert valid.all()
            np.testing.assert_allclose(got, expected, atol=1e-9)
            total += len(pts)
        assert total == 10_000


class TestRigidInvariance:
    def test_errors_unchanged_under_world_reparam(self):
        rng = np.random.default_rng(8)
        pose = random_pose(rng)
        pts = pose.inverse().apply(
            np.column_stack([rng.normal(size=(200, 2)), rng.uniform(1, 10, 200)])
        )
        obs = rng.uniform([0, 0], [128, 128], size=(200, 2))
        base, _ = geo.reprojection_errors(pts, obs, pose, INTR)
        for _ in range(10):
            g = random_pose(rng)
            moved, _ = geo.reprojection_errors(
                g.apply(pts), obs, pose.compose(g.inverse()), INTR
            )
            assert np.abs(moved - base).max() < 1e-7


class TestRobustLoss:
    def test_zero_errors_zero_loss(self):
        assert geo.robust_reproj_loss(np.zeros(5), np.ones(5, bool), clamp=50.0) == 0.0

    def test_single_term_formula(self):
        val = geo.robust_reproj_loss(np.array([7.0]), np.array([True]), clamp=50.0)
        np.testing.assert_allclose(val, 50.0 * np.tanh(7.0 / 50.0))

    def test_saturates_at_clamp(self):
        val = geo.robust_reproj_loss(np.array([1e9]), np.array([True]), clamp=50.0)
        np.testing.assert_allclose(val, 50.0, rtol=1e-12)

    def test_monotone_and_bounded(self):
        errs = np.linspace(0, 500, 200)
        vals = [
            geo.robust_reproj_loss(np.array([e]), np.array([True]), clamp=50.0)
            for e in errs
        ]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert max(vals) <= 50.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no correspondences"):
            geo.robust_reproj_loss(np.array([]), np.array([], dtype=bool), clamp=50.0)

    def test_invalid_without_penalty_rejected(self):
        with pytest.raises(ValueError):
            geo.robust_reproj_loss(np.array([1.0]), np.array([False]), clamp=50.0)

    def test_rejects_nonpositive_clamp(self):
        with pytest.raises(ValueError):
            geo.robust_reproj_loss(np.array([1.0]), np.array([True]), clamp=0.0)

    def test_invalid_terms_use_pseudo_target_distance(self):
        pose = geo.RigidPose.identity()
        pixels = np.array([[40.0, 80.0], [64.0, 64.0]])
        # Both predictions behind the camera: all terms take the penalty path.
        pred = np.array([[0.0, 0.0, -5.0], [1.0, 0.0, -2.0]])
        errors, valid = geo.reproj_loss_terms(Tensor(pred), pixels, pose, INTR)
        assert not valid.any()
        pen = geo.distance_to_pseudo_targets(Tensor(pred), pixels, pose, INTR)
        loss = geo.robust_reproj_loss(errors, valid, 50.0, invalid_penalty=pen)
        targets = geo.pseudo_targets(pixels, pose, INTR)
        expected = np.linalg.norm(pred - targets, axis=1).mean()
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        pose = random_pose(rng)
        pixels = rng.uniform([0, 0], [128, 128], size=(8, 2))
        depths = np.array([2.0, 5.0, 3.0, 8.0, 4.0, -1.0, 6.0, 2000.0])
        pred0 = np.array(
            [geo.backproject(pixels[i], depths[i], pose, INTR) for i in range(8)]
        )
        pred0 += rng.normal(scale=0.05, size=(8, 3))

        def build(p):
            errors, valid = geo.reproj_loss_terms(p, pixels, pose, INTR)
            pen = geo.distance_to_pseudo_targets(p, pixels, pose, INTR)
            return geo.robust_reproj_loss(errors, valid, 50.0, invalid_penalty=pen)

        check_grad(build, pred0, rtol=1e-4, atol=1e-10)

    def test_callable_penalty_form(self):
        errors = np.array([2.0, 3.0])
        valid = np.array([True, False])
        val = geo.robust_reproj_loss(
            errors, valid, 50.0, invalid_penalty=lambda mask: np.array([0.0, 9.0])
        )
        expected = (50.0 * np.tanh(2.0 / 50.0) + 9.0) / 2.0
        np.testing.assert_allclose(val, expected)


class TestBatchReprojLoss:
    def _entries(self, rng, n_poses=3, per_pose=4):
        poses = [random_pose(rng) for _ in range(n_poses)]
        rows_r, rows_t, fx, fy, cx, cy = [], [], [], [], [], []
        pixels, pred = [], []
        depth_menu = [2.0, 5.0, -1.0, 3000.0]
        for p_i, pose in enumerate(poses):
            f = 80.0 + 30.0 * p_i
            for j in range(per_pose):
                px = rng.uniform([0, 0], [128, 128])
                d = depth_menu[(p_i + j) % len(depth_menu)]
                intr = geo.CameraIntrinsics(f, f, 64.0, 64.0, 128, 128)
                pt = geo.backproject(px, abs(d), pose, intr)
                if d < 0:
                    cam = pose.apply(pt[None])[0]
                    cam[2] = d
                    pt = pose.inverse().apply(cam[None])[0]
                pixels.append(px)
                pred.append(pt + rng.normal(scale=0.05, size=3))
                rows_r.append(pose.rotation)
                rows_t.append(pose.translation)
                fx.append(f)
                fy.append(f)
                cx.append(64.0)
                cy.append(64.0)
        return (
            np.array(pred),
            np.array(pixels),
            np.array(rows_r),
            np.array(rows_t),
            np.array(fx),
            np.array(fy),
            np.array(cx),
            np.array(cy),
        )

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(21)
        pred, pixels, r, t, fx, fy, cx, cy = self._entries(rng)
        clamp = 25.0
        got = geo.batch_reproj_loss(pred, pixels, r, t, fx, fy, cx, cy, clamp)

        terms = []
        for i in range(len(pred)):
            cam = r[i] @ pred[i] + t[i]
            if 0.1 < cam[2] < 1000.0:
                du = cam[0] / cam[2] * fx[i] + cx[i] - pixels[i, 0]
                dv = cam[1] / cam[2] * fy[i] + cy[i] - pixels[i, 1]
                e = np.sqrt(du * du + dv * dv + 1e-12)
                terms.append(clamp * np.tanh(e / clamp))
            else:
                ray = np.array(
                    [
                        (pixels[i, 0] - cx[i]) / fx[i] * 10.0,
                        (pixels[i, 1] - cy[i]) / fy[i] * 10.0,
                        10.0,
                    ]
                )
                world = r[i].T @ (ray - t[i])
                d = pred[i] - world
                terms.append(np.sqrt(d @ d + 1e-12))
        np.testing.assert_allclose(got.item(), np.mean(terms), rtol=1e-10)

    def test_single_pose_agreement(self):
        rng = np.random.default_rng(22)
        pose = random_pose(rng)
        pixels = rng.uniform([0, 0], [128, 128], size=(6, 2))
        depths = np.array([2.0, 4.0, -1.0, 6.0, 3.0, 2000.0])
        pred = np.array(
            [geo.backproject(pixels[i], abs(depths[i]), pose, INTR) for i in range(6)]
        )
        for i, d in enumerate(depths):
            if d < 0 or d > 1000:
                cam = pose.apply(pred[i][None])[0]
                cam[2] = d
                pred[i] = pose.inverse().apply(cam[None])[0]
        pred += rng.normal(scale=0.02, size=(6, 3))

        errors, valid = geo.reproj_loss_terms(pred, pixels, pose, INTR)
        pen = geo.distance_to_pseudo_targets(pred, pixels, pose, INTR)
        want = geo.robust_reproj_loss(errors, valid, 30.0, invalid_penalty=pen)

        b = len(pred)
        got = geo.batch_reproj_loss(
            pred,
            pixels,
            np.repeat(pose.rotation[None], b, axis=0),
            np.repeat(pose.translation[None], b, axis=0),
            np.full(b, INTR.fx),
            np.full(b, INTR.fy),
            np.full(b, INTR.cx),
            np.full(b, INTR.cy),
            30.0,
        )
        np.testing.assert_allclose(got.item(), want.item(), rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        pred, pixels, r, t, fx, fy, cx, cy = self._entries(rng, n_poses=2, per_pose=3)

        def build(p):
            return geo.batch_reproj_loss(p, pixels, r, t, fx, fy, cx, cy, 20.0)

        check_grad(build, pred, rtol=1e-4, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            geo.batch_reproj_loss(
                np.zeros((0, 3)),
                np.zeros((0, 2)),
                np.zeros((0, 3, 3)),
                np.zeros((0, 3)),
                np.zeros(0),
                np.zeros(0),
                np.zeros(0),
                np.zeros(0),
                10.0,
            )

    def test_all_valid_skips_penalty_branch(self):
        rng = np.random.default_rng(24)
        pose = random_pose(rng)
        pixels = rng.uniform([10, 10], [118, 118], size=(5, 2))
        pred = np.array(
            [geo.backproject(pixels[i], 3.0 + i, pose, INTR) for i in range(5)]
        )
        b = 5
        got = geo.batch_reproj_loss(
            pred,
            pixels,
            np.repeat(pose.rotation[None], b, axis=0),
            np.repeat(pose.translation[None], b, axis=0),
            np.full(b, INTR.fx),
            np.full(b, INTR.fy),
            np.full(b, INTR.cx),
            np.full(b, INTR.cy),
            50.0,
        )
        # Exact backprojections: every term is the sqrt-eps floor.
        np.testing.assert_allclose(got.item(), 50.0 * np.tanh(1e-6 / 50.0), rtol=1e-3)
