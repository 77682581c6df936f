"""Prior extension and the prior-anchored appearance update."""

import numpy as np
import pytest

import semfactor as sf
from semfactor import adapt_appearance, adapt_target, extend_prior
from semfactor.transfer import uninformative_prior

from util import make_bag, state_of


def random_model(k, d, hp, seed=0):
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal((k, d))
    q = rng.standard_normal((k, k))
    cov = q @ q.T / k + np.eye(k) * 0.1
    return sf.AppearanceModel(mean, cov, [f"f{i}" for i in range(k)], hp)


class TestExtendPrior:
    def test_identity_extension(self):
        hp = sf.Hyperparams(k_max=8)
        model = random_model(4, 3, hp)
        assert extend_prior(model, 4, hp) is model

    def test_block_structure(self):
        hp = sf.Hyperparams(sigma_a=1.4, k_max=80)
        model = random_model(60, 5, hp, seed=1)
        big = extend_prior(model, 80, hp)
        assert big.mean.shape == (80, 5)
        assert np.array_equal(big.mean[:60], model.mean)
        assert np.all(big.mean[60:] == 0.0)
        assert np.all(big.covariance[:60, 60:] == 0.0)
        assert np.all(big.covariance[60:, :60] == 0.0)
        assert np.allclose(big.covariance[60:, 60:], np.eye(20) * hp.sigma_a**2)
        assert big.factor_names[60:] == [f"free-{i:03d}" for i in range(20)]

    def test_extended_covariance_stays_positive_definite(self):
        hp = sf.Hyperparams(k_max=40)
        model = random_model(10, 4, hp, seed=2)
        big = extend_prior(model, 25, hp)
        np.linalg.cholesky(big.covariance)  # raises if not PD

    def test_k_max_enforced(self):
        hp = sf.Hyperparams(k_max=10)
        model = random_model(8, 2, hp)
        with pytest.raises(ValueError, match="k_max"):
            extend_prior(model, 11, hp)


class TestAdaptAppearance:
    def test_empty_target_returns_prior_exactly(self):
        hp = sf.Hyperparams(k_max=5)
        prior = random_model(5, 3, hp, seed=3)
        out = adapt_appearance([], [], prior, hp)
        assert np.array_equal(out.mean, prior.mean)
        assert np.array_equal(out.covariance, prior.covariance)

    def test_all_off_target_returns_prior_exactly(self):
        hp = sf.Hyperparams(k_max=3)
        prior = random_model(3, 2, hp, seed=4)
        bag = make_bag(np.random.default_rng(0).standard_normal((4, 2)))
        out = adapt_appearance([state_of(np.zeros((4, 3)))], [bag], prior, hp)
        assert np.array_equal(out.mean, prior.mean)
        assert np.array_equal(out.covariance, prior.covariance)

    def test_flat_prior_reduces_to_source_posterior(self):
        rng = np.random.default_rng(5)
        k, d, n = 4, 3, 12
        hp = sf.Hyperparams(sigma_x=0.6, sigma_a=1.2, k_max=k)
        z = (rng.random((n, k)) < 0.5).astype(np.int8)
        x = rng.standard_normal((n, d))
        bag = make_bag(x)
        flat = uninformative_prior(k, d, hp)
        adapted = adapt_appearance([state_of(z)], [bag], flat, hp)
        cfg = sf.SweepConfig(iterations=1, sample_appearance=False)
        plain = sf.sample_appearance([state_of(z)], [bag], hp, cfg)
        assert np.abs(adapted.mean - plain.mean).max() <= 1e-10
        assert np.abs(adapted.covariance - plain.covariance).max() <= 1e-10

    def test_near_certain_prior_pins_the_mean(self):
        rng = np.random.default_rng(6)
        k, d, n = 3, 4, 10
        hp = sf.Hyperparams(sigma_x=0.5, k_max=k)
        base = random_model(k, d, hp, seed=7)
        tight = sf.AppearanceModel(
            base.mean, base.covariance * 1e-8, base.factor_names, hp
        )
        z = (rng.random((n, k)) < 0.6).astype(np.int8)
        x = rng.standard_normal((n, d)) * 2.0
        out = adapt_appearance([state_of(z)], [make_bag(x)], tight, hp)
        assert np.linalg.norm(out.mean - tight.mean) < 1e-3

    def test_singular_prior_rejected(self):
        hp = sf.Hyperparams(k_max=2)
        bad = sf.AppearanceModel(np.zeros((2, 2)), np.array([[1.0, 1.0], [1.0, 1.0]]) + np.eye(2) * 0, ["a", "b"], hp)
        bag = make_bag(np.ones((2, 2)))
        with pytest.raises((ValueError, np.linalg.LinAlgError)):
            out = adapt_appearance([state_of(np.eye(2, dtype=np.int8))], [bag], bad, hp)
            # a numerically singular inverse may slip through as inf/nan
            if not np.isfinite(out.mean).all():
                raise ValueError("singular prior covariance")


class TestAdaptTarget:
    def _target(self, seed=0, shift=0.8):
        spec = sf.SyntheticSpec(
            n_images=4, grid=4, k_true=3, d=5, noise_std=0.2, seed=seed,
            domain_shift=(shift,) * 5, n_target=4, patch_px=8,
        )
        res = sf.synth_generate(spec)
        hp = sf.Hyperparams(beta=0.5, sigma_x=0.25, k_supervised=3, k_max=8, rng_seed=7)
        cfg = sf.SweepConfig(iterations=12, birth_enabled=False, sample_appearance=False)
        src = sf.train_auxiliary([sf.TrainingSet(res.source)], hp, cfg)
        return res, hp, src

    def test_returns_requested_width_and_trailing(self):
        res, hp, src = self._target()
        cfg = sf.target_config(iterations=10, retain_samples=4)
        out = adapt_target(res.target, src.model, hp, cfg, k_target=6)
        assert out.model.k_active == 6
        assert len(out.trailing[0]) == 4
        assert out.trailing_mean(0).shape == (16, 6)
        assert all(s.k_active == 6 for s in out.states)

    def test_no_adapt_keeps_the_extended_source(self):
        res, hp, src = self._target(seed=1)
        iters = 8
        cfg = sf.target_config(iterations=iters, appearance_resample_period=iters + 1,
                               retain_samples=2)
        out = adapt_target(res.target, src.model, hp, cfg, k_target=5)
        prior = extend_prior(src.model, 5, hp)
        assert np.array_equal(out.model.mean, prior.mean)
        assert np.array_equal(out.model.covariance, prior.covariance)
        # states were still inferred
        assert any(s.z.any() for s in out.states)

    def test_bitwise_determinism(self):
        res, hp, src = self._target(seed=2)
        cfg = sf.target_config(iterations=6, retain_samples=3)
        a = adapt_target(res.target, src.model, hp, cfg, k_target=5)
        b = adapt_target(res.target, src.model, hp, cfg, k_target=5)
        assert np.array_equal(a.model.mean, b.model.mean)
        assert np.array_equal(a.model.covariance, b.model.covariance)
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.z, sb.z)

    def test_serial_equals_batched(self):
        res, hp, src = self._target(seed=3)
        cfg = sf.target_config(iterations=5, retain_samples=2)
        a = adapt_target(res.target, src.model, hp, cfg, k_target=5, schedule="serial")
        b = adapt_target(res.target, src.model, hp, cfg, k_target=5, schedule="batched")
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.z, sb.z)
        assert np.array_equal(a.model.mean, b.model.mean)

    def test_dimension_mismatch_rejected(self):
        res, hp, src = self._target(seed=4)
        bad = make_bag(np.zeros((3, 2)), image_id="bad")
        with pytest.raises(sf.DimensionError):
            adapt_target([bad], src.model, hp, sf.target_config(iterations=2), k_target=4)

    def test_empty_target_rejected(self):
        res, hp, src = self._target(seed=5)
        with pytest.raises(ValueError, match="no target images"):
            adapt_target([], src.model, hp, sf.target_config(iterations=2))
