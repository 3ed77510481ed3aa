from __future__ import annotations

import numpy as np
import pytest

from diffground import LatentTensor, NoiseSample, SeedRecord, add_noise, make_schedule, sample_noise
from diffground.schedule import InvalidScheduleParams, ShapeMismatch, TimestepOutOfRange


def brute_force_alpha_bar(beta_start: float, beta_end: float, timesteps: int, t: int) -> float:
    """Sequential pure-python running product, independent of numpy cumprod."""
    prod = 1.0
    for i in range(t):
        beta = beta_start + (beta_end - beta_start) * i / (timesteps - 1)
        prod *= 1.0 - beta
    return prod


class TestMakeSchedule:
    def test_constant_beta_running_product(self):
        s = make_schedule("linear", 0.1, 0.1, 3)
        np.testing.assert_allclose(s.betas, [0.1, 0.1, 0.1], rtol=1e-15)
        np.testing.assert_allclose(s.alpha_bars, [0.9, 0.81, 0.729], rtol=1e-12)

    def test_single_step(self):
        s = make_schedule("linear", 0.05, 0.05, 1)
        assert s.alpha_bars[0] == pytest.approx(0.95, rel=1e-15)

    def test_default_parameters_match_brute_force_product(self):
        s = make_schedule("linear", 1e-4, 0.02, 1000)
        oracle = brute_force_alpha_bar(1e-4, 0.02, 1000, 1000)
        assert oracle == pytest.approx(4.0358297653756754e-05, rel=1e-12)  # frozen from the oracle
        assert s.alpha_bars[-1] == pytest.approx(oracle, rel=1e-7)

    def test_scaled_linear_sqrt_spacing(self):
        s = make_schedule("scaled_linear", 0.0001, 0.04, 5)
        sqrts = np.sqrt(s.betas)
        np.testing.assert_allclose(np.diff(sqrts), np.diff(sqrts)[0], rtol=1e-9)
        assert s.betas[0] == pytest.approx(0.0001, rel=1e-12)
        assert s.betas[-1] == pytest.approx(0.04, rel=1e-12)

    def test_alpha_bar_running_product_invariant(self):
        s = make_schedule("scaled_linear", 1e-4, 0.02, 500)
        running = np.cumprod(1.0 - s.betas)
        np.testing.assert_allclose(s.alpha_bars, running, rtol=1e-12)

    @pytest.mark.parametrize(
        "kind,b0,b1,T",
        [
            ("cosine", 1e-4, 0.02, 10),
            ("linear", 0.0, 0.02, 10),
            ("linear", 1e-4, 1.0, 10),
            ("linear", 0.02, 1e-4, 10),
            ("linear", 1e-4, 0.02, 0),
        ],
    )
    def test_invalid_params(self, kind, b0, b1, T):
        with pytest.raises(InvalidScheduleParams):
            make_schedule(kind, b0, b1, T)

    def test_coefficient_identity_and_monotonicity(self):
        s = make_schedule("linear", 1e-4, 0.02, 1000)
        ab = s.alpha_bars
        assert np.max(np.abs(np.sqrt(ab) ** 2 + (1.0 - ab) - 1.0)) < 1e-12
        assert np.all(np.diff(ab) < 0)
        assert np.all(np.diff(np.sqrt(1.0 - ab)) > 0)
        assert np.all((ab > 0) & (ab < 1))


class TestAddNoise:
    @pytest.fixture()
    def sched(self):
        return make_schedule("linear", 0.1, 0.1, 3)

    def test_zero_noise_scales_signal(self, sched):
        z0 = LatentTensor(values=np.arange(12.0).reshape(3, 2, 2))
        eps = NoiseSample(values=np.zeros((3, 2, 2)), seed=SeedRecord(0, 0, 0))
        zt = add_noise(z0, eps, 3, sched)
        np.testing.assert_array_equal(zt.values, np.sqrt(0.7290000000000001) * z0.values)
        assert zt.t == 3
        assert zt.noise is eps

    def test_zero_signal_scales_noise(self, sched):
        z0 = LatentTensor(values=np.zeros((1, 2, 2)))
        eps = NoiseSample(values=np.full((1, 2, 2), 2.0), seed=SeedRecord(0, 0, 0))
        zt = add_noise(z0, eps, 2, sched)
        np.testing.assert_allclose(zt.values, np.sqrt(1 - 0.81) * 2.0, rtol=1e-12)

    def test_ones_signal_ones_noise(self, sched):
        z0 = LatentTensor(values=np.ones((1, 1, 1)))
        eps = NoiseSample(values=np.ones((1, 1, 1)), seed=SeedRecord(0, 0, 0))
        zt = add_noise(z0, eps, 3, sched)
        assert zt.values[0, 0, 0] == pytest.approx(1.3743915716382773, rel=1e-12)

    def test_shape_mismatch(self, sched):
        z0 = LatentTensor(values=np.zeros((1, 2, 2)))
        eps = NoiseSample(values=np.zeros((1, 2, 3)), seed=SeedRecord(0, 0, 0))
        with pytest.raises(ShapeMismatch):
            add_noise(z0, eps, 1, sched)

    @pytest.mark.parametrize("t", [0, 4, -1])
    def test_timestep_out_of_range(self, sched, t):
        z0 = LatentTensor(values=np.zeros((1, 1, 1)))
        eps = NoiseSample(values=np.zeros((1, 1, 1)), seed=SeedRecord(0, 0, 0))
        with pytest.raises(TimestepOutOfRange):
            add_noise(z0, eps, t, sched)

    def test_linear_in_signal_and_noise(self, sched):
        rng = np.random.default_rng(0)
        a, b = rng.random((2, 2, 3, 3))
        eps_vals = rng.random((2, 3, 3))
        eps = NoiseSample(values=eps_vals, seed=SeedRecord(0, 0, 0))
        zero = NoiseSample(values=np.zeros((2, 3, 3)), seed=SeedRecord(0, 0, 0))
        lhs = add_noise(LatentTensor(values=2.0 * a + 3.0 * b), zero, 2, sched).values
        rhs = 2.0 * add_noise(LatentTensor(values=a), zero, 2, sched).values + 3.0 * add_noise(
            LatentTensor(values=b), zero, 2, sched
        ).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        lhs_n = add_noise(LatentTensor(values=a), NoiseSample(values=5.0 * eps_vals, seed=eps.seed), 2, sched).values
        rhs_n = (
            add_noise(LatentTensor(values=a), eps, 2, sched).values
            + 4.0 * np.sqrt(1 - 0.81) * eps_vals
        )
        np.testing.assert_allclose(lhs_n, rhs_n, atol=1e-12)


class TestSampleNoise:
    def test_same_record_is_bit_identical(self):
        a = sample_noise((4, 8, 8), SeedRecord(42, 3, 1))
        b = sample_noise((4, 8, 8), SeedRecord(42, 3, 1))
        assert np.array_equal(a.values, b.values)
        assert a.seed == b.seed

    def test_different_indices_differ(self):
        base = sample_noise((4, 8, 8), SeedRecord(42, 3, 1))
        assert not np.array_equal(base.values, sample_noise((4, 8, 8), SeedRecord(42, 3, 2)).values)
        assert not np.array_equal(base.values, sample_noise((4, 8, 8), SeedRecord(42, 4, 1)).values)
        assert not np.array_equal(base.values, sample_noise((4, 8, 8), SeedRecord(43, 3, 1)).values)

    def test_pooled_moments(self):
        pooled = np.concatenate(
            [sample_noise((100, 100), SeedRecord(7, i, 0)).values.ravel() for i in range(100)]
        )
        assert pooled.size == 10**6
        assert abs(pooled.mean()) < 0.01
        assert abs(pooled.var() - 1.0) < 0.02

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            SeedRecord(-1, 0, 0)


class TestStepwiseVsClosedForm:
    def test_moments_match_within_three_standard_errors(self):
        # iterate q(z_t | z_{t-1}) with fresh per-step noise and compare
        # moments against the closed form at t
        sched = make_schedule("linear", 1e-3, 0.05, 30)
        t = 30
        trials = 10_000
        rng = np.random.default_rng(99)
        z0 = np.array([0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 0.75, -1.75])
        z = np.tile(z0, (trials, 1))
        for i in range(1, t + 1):
            beta = sched.beta(i)
            z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * rng.standard_normal(z.shape)
        abar = sched.alpha_bar(t)
        target_mean = np.sqrt(abar) * z0
        target_var = 1.0 - abar
        se_mean = np.sqrt(target_var / trials)
        se_var = target_var * np.sqrt(2.0 / (trials - 1))
        assert np.all(np.abs(z.mean(axis=0) - target_mean) < 3 * se_mean)
        assert np.all(np.abs(z.var(axis=0, ddof=1) - target_var) < 3 * se_var)
