import numpy as np
import pytest

from fusc.augment import (
    OpSpec,
    augment,
    identity_policy,
    standard_policy,
    strong_policy,
)


@pytest.fixture
def texture(rng):
    # natural-texture stand-in: smooth field plus speckle
    base = np.cumsum(np.cumsum(rng.normal(size=(32, 32)), axis=0), axis=1)
    base = (base - base.min()) / (base.max() - base.min())
    return base.astype(np.float32)


class TestAugment:
    def test_deterministic_per_seed(self, texture):
        a1, b1 = augment(texture, standard_policy(), seed=42)
        a2, b2 = augment(texture, standard_policy(), seed=42)
        assert np.array_equal(a1, a2)
        assert np.array_equal(b1, b2)

    def test_identity_policy_returns_input(self, texture):
        a, b = augment(texture, identity_policy(), seed=0)
        assert np.array_equal(a, texture)
        assert np.array_equal(b, texture)

    def test_different_seeds_differ(self, texture):
        a0, _ = augment(texture, standard_policy(), seed=0)
        a1, _ = augment(texture, standard_policy(), seed=1)
        assert not np.array_equal(a0, a1)

    def test_two_views_sampled_independently(self, texture):
        a, b = augment(texture, standard_policy(), seed=3)
        assert not np.array_equal(a, b)

    def test_output_range_and_shape(self, texture):
        for seed in range(5):
            a, b = augment(texture, strong_policy(), seed=seed)
            for view in (a, b):
                assert view.shape == texture.shape
                assert view.dtype == np.float32
                assert view.min() >= -1e-6 and view.max() <= 1.0 + 1e-6

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError):
            augment(np.zeros((0, 0), dtype=np.float32), standard_policy(), seed=0)


class TestPolicies:
    def test_strong_magnitudes_contain_standard(self):
        std = {op.kind: op for op in standard_policy().ops}
        strong = {op.kind: op for op in strong_policy().ops}
        assert set(std) == set(strong)
        for kind, s in std.items():
            assert strong[kind].lo <= s.lo
            assert strong[kind].hi >= s.hi

    def test_op_validation(self):
        with pytest.raises(ValueError):
            OpSpec("warp", prob=0.5)
        with pytest.raises(ValueError):
            OpSpec("hflip", prob=1.5)
        with pytest.raises(ValueError):
            OpSpec("rotate", prob=0.5, lo=10.0, hi=-10.0)
