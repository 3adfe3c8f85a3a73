import numpy as np
import pytest
from scipy import stats

from moeloc import features as feat
from moeloc import geometry as geo
from moeloc import synth


@pytest.fixture(scope="module")
def small_dataset():
    scene = synth.generate_scene(2, 900, separation=6.0, seed=40)
    spec = synth.TrajectorySpec(
        frames_per_region=8, radius_range=(2.6, 3.0), resolution=(128, 128)
    )
    return synth.build_dataset(scene, spec, seed=41)


@pytest.fixture(scope="module")
def encoder():
    return feat.Encoder(seed=0)


class TestEncode:
    def test_output_shape(self, encoder):
        fm = encoder.encode(np.zeros((128, 128, 3)))
        assert fm.descriptors.shape == (16, 16, 128)
        assert fm.pixel_centers.shape == (16, 16, 2)
        assert fm.stride == 8

    def test_rejects_non_divisible(self, encoder):
        with pytest.raises(ValueError):
            encoder.encode(np.zeros((100, 127, 3)))

    def test_deterministic(self, encoder, small_dataset):
        img = small_dataset[0].image
        a = encoder.encode(img).descriptors
        b = encoder.encode(img).descriptors
        np.testing.assert_array_equal(a, b)

    def test_finite_on_extreme_images(self, encoder):
        for img in (np.zeros((64, 64, 3)), np.ones((64, 64, 3))):
            fm = encoder.encode(img)
            assert np.isfinite(fm.descriptors).all()

    def test_receptive_field_locality(self, encoder):
        rng = np.random.default_rng(42)
        img = rng.uniform(size=(64, 64, 3))
        base = encoder.encode(img).descriptors
        row, col = 33, 41
        bumped = img.copy()
        bumped[row, col] += 0.5
        changed = np.abs(encoder.encode(bumped).descriptors - base).max(axis=2) > 0
        rows, cols = np.nonzero(changed)
        assert len(rows) > 0
        half = (feat.RECEPTIVE_FIELD - 1) // 2
        assert (np.abs(8 * cols - col) <= half).all()
        assert (np.abs(8 * rows - row) <= half).all()
        # The nearest cell must itself react.
        assert changed[round(row / 8), round(col / 8)]


class TestImageEmbedding:
    def test_constant_map(self):
        d = np.full((4, 4, 16), 2.5)
        centers = np.zeros((4, 4, 2))
        fm = feat.FeatureMap(d, centers, 8)
        np.testing.assert_allclose(feat.image_embedding(fm), np.full(16, 2.5))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(5, 6, 8))
        fm = feat.FeatureMap(d, np.zeros((5, 6, 2)), 8)
        flat = d.reshape(-1, 8)[rng.permutation(30)]
        fm2 = feat.FeatureMap(flat.reshape(5, 6, 8), np.zeros((5, 6, 2)), 8)
        np.testing.assert_allclose(
            feat.image_embedding(fm), feat.image_embedding(fm2), atol=1e-12
        )

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(7, 3, 12))
        fm = feat.FeatureMap(d, np.zeros((7, 3, 2)), 8)
        brute = sum(d[i, j] for i in range(7) for j in range(3)) / 21
        assert np.abs(feat.image_embedding(fm) - brute).max() < 1e-6


class TestAugmentView:
    def test_pose_consistency(self, small_dataset):
        # Warped ground-truth coords must reproject near their new pixel
        # under the augmented pose and intrinsics.
        rng = np.random.default_rng(3)
        view = small_dataset[1]
        aug = feat.augment_view(view, rng)
        rows, cols = np.nonzero(aug.gt_valid)
        assert len(rows) > 200
        px, _, ok = geo.project(aug.pose, aug.intrinsics, aug.gt_coords[rows, cols])
        assert ok.all()
        dist = np.linalg.norm(px - np.stack([cols, rows], axis=1), axis=1)
        # Splat radius scaled by max zoom, plus nearest-neighbor slack.
        assert np.quantile(dist, 0.99) <= 2.0 * 1.5 + 1.5

    def test_deterministic(self, small_dataset):
        a = feat.augment_view(small_dataset[0], np.random.default_rng(7))
        b = feat.augment_view(small_dataset[0], np.random.default_rng(7))
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        assert a.intrinsics == b.intrinsics


class TestFillBuffer:
    def test_capacity_and_per_view_counts(self, small_dataset, encoder):
        views = small_dataset[:10]
        buf = feat.fill_buffer(views, encoder, capacity=1000, seed=5)
        assert len(buf) == 1000
        counts = np.bincount(buf.view_index, minlength=10)
        # Multinomial null: mean 100, sigma < 9.5 per view.
        sigma = np.sqrt(1000 * 0.1 * 0.9)
        assert (np.abs(counts - 100) <= 5 * sigma).all()

    def test_deterministic_without_augment(self, small_dataset, encoder):
        a = feat.fill_buffer(small_dataset[:4], encoder, capacity=500, seed=6)
        b = feat.fill_buffer(small_dataset[:4], encoder, capacity=500, seed=6)
        np.testing.assert_array_equal(a.descriptors, b.descriptors)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        np.testing.assert_array_equal(a.view_index, b.view_index)

    def test_entries_are_valid(self, small_dataset, encoder):
        views = small_dataset[:4]
        buf = feat.fill_buffer(views, encoder, capacity=500, seed=8)
        for i in range(len(buf)):
            u, v = buf.pixels[i]
            intr = buf.intrinsics[buf.view_index[i]]
            assert 0 <= u < intr.width and 0 <= v < intr.height
            pose = buf.poses[buf.view_index[i]]
            assert np.isfinite(pose.matrix()).all()

    def test_rejects_empty_dataset(self, encoder):
        with pytest.raises(ValueError):
            feat.fill_buffer([], encoder, capacity=100)

    def test_rejects_bad_capacity(self, small_dataset, encoder):
        with pytest.raises(ValueError):
            feat.fill_buffer(small_dataset[:2], encoder, capacity=0)

    def test_sampling_uniform_chi_square(self, small_dataset, encoder):
        views = small_dataset[:8]
        buf = feat.fill_buffer(views, encoder, capacity=10_000, seed=9)
        assert len(buf) == 10_000
        counts = np.bincount(buf.view_index, minlength=8)
        # Candidate pool sizes per view set the expected proportions.
        pools = []
        for v in views:
            fm = encoder.encode(v.image)
            rows = fm.pixel_centers[..., 1].astype(int)
            cols = fm.pixel_centers[..., 0].astype(int)
            pools.append(v.gt_valid[rows, cols].sum())
        pools = np.array(pools, dtype=float)
        expected = 10_000 * pools / pools.sum()
        _, p = stats.chisquare(counts, expected)
        assert p > 0.001

    def test_augment_adds_distinct_views(self, small_dataset, encoder):
        views = small_dataset[:3]
        plain = feat.fill_buffer(views, encoder, capacity=3000, seed=10)
        aug = feat.fill_buffer(views, encoder, capacity=3000, augment=True, seed=10)
        assert len(plain.poses) == 3
        assert len(aug.poses) > 3
        assert len(aug) == 3000
