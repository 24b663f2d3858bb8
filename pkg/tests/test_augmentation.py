"""Augmentation pipeline tests: gating, determinism, pixel-range safety."""

import numpy as np
import pytest

from latentgaze.augmentation import (
    PHOTOMETRIC_TRANSFORMS,
    AugmentationConfig,
    AugmentationConfigError,
    TransformSpec,
    build_pipeline,
    default_config,
    default_transforms,
    generate_views,
    resize_bilinear,
)


def _test_image(h=48, w=48, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(3, h, w)).astype(np.float32)


def _zero_p_config(size=(32, 32)):
    specs = [TransformSpec(t.name, 0.0, t.params) for t in default_transforms()]
    return AugmentationConfig(specs, size)


class TestPipelineBasics:
    def test_all_zero_p_is_resize_only(self):
        img = _test_image(32, 32)
        pipe = build_pipeline(_zero_p_config((32, 32)))
        out = pipe.apply(img, np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_flip_only_mirrors(self):
        img = _test_image(32, 32)
        specs = [TransformSpec("horizontal_flip", 1.0)]
        pipe = build_pipeline(AugmentationConfig(specs, (32, 32)))
        out = pipe.apply(img, np.random.default_rng(0))
        np.testing.assert_array_equal(out, img[:, :, ::-1])

    def test_unknown_transform_rejected(self):
        with pytest.raises(AugmentationConfigError):
            TransformSpec("warp_time", 0.5)

    def test_out_of_range_probability_rejected(self):
        with pytest.raises(AugmentationConfigError):
            TransformSpec("horizontal_flip", 1.5)

    def test_order_enforced(self):
        with pytest.raises(AugmentationConfigError):
            AugmentationConfig(
                [TransformSpec("cutout", 0.1), TransformSpec("horizontal_flip", 0.5)]
            )

    def test_wrong_channel_count_rejected(self):
        pipe = build_pipeline(default_config((16, 16)))
        with pytest.raises(AugmentationConfigError):
            pipe.apply(np.zeros((1, 16, 16), dtype=np.float32), np.random.default_rng(0))


class TestPixelRange:
    @pytest.mark.parametrize("name", sorted(t.name for t in default_transforms()))
    def test_each_transform_keeps_unit_range(self, name):
        img = _test_image(40, 40, seed=3)
        params = next(t.params for t in default_transforms() if t.name == name)
        specs = [TransformSpec(name, 1.0, params)]
        pipe = build_pipeline(AugmentationConfig(specs, (40, 40)))
        for seed in range(5):
            out = pipe.apply(img, np.random.default_rng(seed))
            assert out.min() >= 0.0
            assert out.max() <= 1.0
            assert out.shape == (3, 40, 40)


class TestDeterminism:
    def test_full_stack_seed_reproducible(self):
        img = _test_image(64, 64, seed=5)
        cfg = default_config((48, 48))
        pipe = build_pipeline(cfg)
        a = pipe.apply(img, np.random.default_rng(1234))
        b = pipe.apply(img, np.random.default_rng(1234))
        assert a.tobytes() == b.tobytes()

    def test_generate_views_reproducible(self):
        img = _test_image(64, 64, seed=6)
        pipe = build_pipeline(default_config((48, 48)))
        first = generate_views(img, pipe, seed=99)
        second = generate_views(img, pipe, seed=99)
        assert first.v.tobytes() == second.v.tobytes()
        assert first.v_prime.tobytes() == second.v_prime.tobytes()

    def test_views_are_independent_samples(self):
        img = _test_image(64, 64, seed=7)
        pipe = build_pipeline(default_config((48, 48)))
        pair = generate_views(img, pipe, seed=3)
        assert pair.v.tobytes() != pair.v_prime.tobytes()

    def test_identity_pipeline_views_equal(self):
        img = _test_image(32, 32, seed=8)
        pipe = build_pipeline(_zero_p_config((32, 32)))
        pair = generate_views(img, pipe, seed=0)
        np.testing.assert_array_equal(pair.v, pair.v_prime)
        np.testing.assert_array_equal(pair.v, img)

    def test_rotation_views_differ(self):
        img = _test_image(32, 32, seed=9)
        specs = [TransformSpec("random_rotation", 1.0, {"degrees": 30.0})]
        pipe = build_pipeline(AugmentationConfig(specs, (32, 32)))
        pair = generate_views(img, pipe, seed=17)
        assert pair.v.tobytes() != pair.v_prime.tobytes()


class TestGatingFrequency:
    def test_empirical_rates_match_probabilities(self):
        img = _test_image(8, 8, seed=10)
        probs = {"horizontal_flip": 0.5, "random_grayscale": 0.2, "random_invert": 0.1}
        specs = [TransformSpec(n, p) for n, p in probs.items()]
        pipe = build_pipeline(AugmentationConfig(specs, (8, 8)))
        n = 10_000
        rng = np.random.default_rng(42)
        counts = {name: 0 for name in probs}
        for _ in range(n):
            log = []
            pipe.apply(img, rng, log=log)
            for name in log:
                counts[name] += 1
        for name, p in probs.items():
            tol = 3 * np.sqrt(p * (1 - p) / n)
            assert abs(counts[name] / n - p) <= tol


class TestPhotometricSubset:
    def test_subset_has_no_geometric_transforms(self):
        pipe = build_pipeline(default_config((36, 60)))
        photo = pipe.photometric()
        names = {t.name for t in photo.config.transforms}
        assert names <= PHOTOMETRIC_TRANSFORMS

    def test_subset_preserves_structure(self):
        # Grayscale/invert/noise change values but never move pixels: a
        # single bright pixel must stay at its location.
        img = np.zeros((3, 36, 60), dtype=np.float32)
        img[:, 18, 30] = 1.0
        pipe = build_pipeline(default_config((36, 60))).photometric()
        out = pipe.apply(img, np.random.default_rng(0))
        flat = out.sum(axis=0)
        assert np.unravel_index(np.argmax(flat), flat.shape) == (18, 30)


class TestResize:
    def test_identity_when_same_size(self):
        img = _test_image(20, 30)
        np.testing.assert_array_equal(resize_bilinear(img, (20, 30)), img)

    def test_constant_image_stays_constant(self):
        img = np.full((3, 17, 23), 0.37, dtype=np.float32)
        out = resize_bilinear(img, (36, 60))
        np.testing.assert_allclose(out, 0.37, atol=1e-6)

    def test_output_shape(self):
        out = resize_bilinear(_test_image(50, 70), (36, 60))
        assert out.shape == (3, 36, 60)
