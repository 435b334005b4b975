import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clearsky.diffusion import (
    DegradedPair,
    DiffusionState,
    build_schedule,
    diffuse,
    estimate_noise,
    forward_sample,
    implicit_sample,
    residual_loss,
    reverse_mean_sigma,
    sampling_timesteps,
    seeded_noise_like,
)


def random_pair(rng, size=6):
    clean = rng.uniform(0, 1, size=(size, size, 3))
    degraded = np.clip(clean + rng.uniform(-0.3, 0.5, size=clean.shape), 0, 1)
    return DegradedPair(clean=clean, degraded=degraded)


class TestSchedule:
    def test_terminal_constraints_exact(self):
        s = build_schedule(100, 0.1)
        assert abs(s.abar(100) - 1.0) <= 1e-12
        assert abs(s.dbar(100) - 0.9) <= 1e-12
        assert abs(s.bbar(100) - 0.1) <= 1e-12

    def test_midpoint_values_T2(self):
        s = build_schedule(2, 1.0)
        assert s.abar(1) == pytest.approx(0.5, abs=1e-12)
        assert s.dbar(1) == pytest.approx(0.45, abs=1e-12)
        assert s.bbar(1) == pytest.approx(np.sqrt(0.5), abs=1e-12)

    @pytest.mark.parametrize("T,bbT", [(2, 1.0), (10, 0.3), (100, 0.1), (731, 0.05)])
    def test_telescoping(self, T, bbT):
        s = build_schedule(T, bbT)
        assert abs(np.sum(s.beta**2) - bbT**2) <= 1e-10
        assert abs(np.sum(s.alpha) - 1.0) <= 1e-10
        assert abs(np.sum(s.delta) - 0.9) <= 1e-10

    def test_beta_bar_strictly_increasing(self):
        s = build_schedule(50, 0.2)
        assert np.all(np.diff(s.beta_bar) > 0)
        assert s.bbar(1) > 0
        assert s.bbar(0) == 0.0

    def test_per_step_beta_square_nonnegative(self):
        s = build_schedule(40, 0.7)
        diffs = s.beta_bar[1:] ** 2 - s.beta_bar[:-1] ** 2
        assert np.all(diffs >= 0)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_schedule(1, 0.1)
        with pytest.raises(ValueError):
            build_schedule(10, 0.0)
        with pytest.raises(ValueError):
            build_schedule(10, -1.0)


class TestForward:
    def test_terminal_identity(self, rng):
        s = build_schedule(100, 0.1)
        pair = random_pair(rng)
        eps = rng.standard_normal(pair.clean.shape)
        state = forward_sample(s, pair, 100, eps)
        expected = 0.1 * pair.degraded + s.bbar(100) * eps
        np.testing.assert_allclose(state.image, expected, atol=1e-6)

    def test_zero_residual_no_noise(self, rng):
        s = build_schedule(20, 0.1)
        clean = rng.uniform(0, 1, (5, 5, 3))
        pair = DegradedPair(clean=clean, degraded=clean.copy())
        t = 13
        state = forward_sample(s, pair, t, np.zeros_like(clean))
        np.testing.assert_allclose(state.image, (1 - s.dbar(t)) * clean, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        s = build_schedule(50, 0.3)
        pair = random_pair(rng, size=4)
        t = 25
        eps = rng.standard_normal(pair.clean.shape)
        state = forward_sample(s, pair, t, eps)
        # independent per-pixel evaluation of the closed form
        for idx in np.ndindex(pair.clean.shape):
            i0, iin, e = pair.clean[idx], pair.degraded[idx], eps[idx]
            expected = i0 + s.abar(t) * (iin - i0) + s.bbar(t) * e - s.dbar(t) * iin
            assert state.image[idx] == pytest.approx(expected, abs=1e-12)

    def test_rejects_out_of_range_t(self, rng):
        s = build_schedule(10, 0.1)
        pair = random_pair(rng)
        eps = np.zeros_like(pair.clean)
        for t in (0, 11):
            with pytest.raises(ValueError):
                forward_sample(s, pair, t, eps)

    def test_rejects_shape_mismatch(self, rng):
        s = build_schedule(10, 0.1)
        pair = random_pair(rng)
        with pytest.raises(ValueError):
            diffuse(s, pair.clean, pair.degraded, 5, np.zeros((2, 2, 3)))

    def test_batched_t_matches_per_sample(self, rng):
        s = build_schedule(30, 0.2)
        clean = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        degraded = torch.rand(4, 3, 8, 8, dtype=torch.float64)
        eps = torch.randn(4, 3, 8, 8, dtype=torch.float64)
        ts = np.array([1, 7, 15, 30])
        batched = diffuse(s, clean, degraded, ts, eps)
        for i, t in enumerate(ts):
            single = diffuse(s, clean[i], degraded[i], int(t), eps[i])
            assert torch.equal(batched[i], single)


class TestDegradedPair:
    def test_residual_computed(self, rng):
        clean = rng.uniform(0, 1, (4, 4, 3))
        degraded = np.clip(clean + 0.1, 0, 1)
        pair = DegradedPair(clean=clean, degraded=degraded)
        np.testing.assert_allclose(pair.residual, degraded - clean, atol=1e-12)

    def test_inconsistent_residual_rejected(self, rng):
        clean = rng.uniform(0, 1, (4, 4, 3))
        with pytest.raises(ValueError):
            DegradedPair(clean=clean, degraded=clean, residual=np.ones_like(clean))


class TestEstimateNoise:
    def test_roundtrip_recovers_noise(self, rng):
        s = build_schedule(60, 0.25)
        pair = random_pair(rng)
        for t in (1, 17, 60):
            eps = rng.standard_normal(pair.clean.shape)
            state = forward_sample(s, pair, t, eps)
            rec = estimate_noise(s, state, pair.degraded, pair.residual)
            np.testing.assert_allclose(rec, eps, rtol=1e-6, atol=1e-8)

    def test_true_residual_zero_noise(self, rng):
        s = build_schedule(60, 0.25)
        pair = random_pair(rng)
        state = forward_sample(s, pair, 30, np.zeros_like(pair.clean))
        rec = estimate_noise(s, state, pair.degraded, pair.residual)
        np.testing.assert_allclose(rec, 0.0, atol=1e-9)

    def test_perturbation_sensitivity_scalar_oracle(self, rng):
        # eps_hat shifts by exactly (1 - abar_t) * d_res / bbar_t
        s = build_schedule(40, 0.2)
        pair = random_pair(rng)
        t = 11
        eps = rng.standard_normal(pair.clean.shape)
        state = forward_sample(s, pair, t, eps)
        delta = rng.standard_normal(pair.clean.shape) * 0.01
        base = estimate_noise(s, state, pair.degraded, pair.residual)
        shifted = estimate_noise(s, state, pair.degraded, pair.residual + delta)
        expected = (1 - s.abar(t)) * delta / s.bbar(t)
        np.testing.assert_allclose(shifted - base, expected, rtol=1e-9, atol=1e-12)


class TestReverse:
    def test_sigma_zero_at_t1(self, rng):
        s = build_schedule(30, 0.1)
        pair = random_pair(rng)
        state = forward_sample(s, pair, 1, np.zeros_like(pair.clean))
        _, sigma = reverse_mean_sigma(s, state, pair.degraded, pair.residual, np.zeros_like(pair.clean))
        assert sigma == 0.0

    def test_identity_drift(self, rng):
        s = build_schedule(30, 0.1)
        img = rng.uniform(0, 1, (4, 4, 3))
        state = DiffusionState(image=img, t=9)
        zero = np.zeros_like(img)
        mean, _ = reverse_mean_sigma(s, state, zero, zero, zero)
        np.testing.assert_allclose(mean, img, atol=1e-12)

    def test_matches_scalar_oracle(self, rng):
        s = build_schedule(25, 0.4)
        pair = random_pair(rng, size=3)
        t = 12
        eps = rng.standard_normal(pair.clean.shape)
        state = forward_sample(s, pair, t, eps)
        res_hat = rng.standard_normal(pair.clean.shape) * 0.1
        eps_hat = rng.standard_normal(pair.clean.shape)
        mean, sigma = reverse_mean_sigma(s, state, pair.degraded, res_hat, eps_hat)
        bt, bb = s.beta_t(t), s.bbar(t)
        for idx in np.ndindex(pair.clean.shape):
            expected = (
                state.image[idx]
                - s.alpha_t(t) * res_hat[idx]
                + s.delta_t(t) * pair.degraded[idx]
                - bt**2 / bb * eps_hat[idx]
            )
            assert mean[idx] == pytest.approx(expected, abs=1e-12)
        assert sigma == pytest.approx(bt * s.bbar(t - 1) / bb, abs=1e-15)

    def test_consistent_with_forward_at_t_minus_1(self, rng):
        # with true residual/noise the reverse mean equals the forward
        # closed form at t-1 with the same noise direction scaled by
        # bbar_{t-1}^2 / bbar_t (scalar oracle on 2x2 images)
        s = build_schedule(16, 0.3)
        clean = rng.uniform(0, 1, (2, 2, 3))
        degraded = np.clip(clean + rng.uniform(-0.2, 0.4, clean.shape), 0, 1)
        pair = DegradedPair(clean=clean, degraded=degraded)
        for t in (2, 9, 16):
            eps = rng.standard_normal(clean.shape)
            state = forward_sample(s, pair, t, eps)
            eps_hat = estimate_noise(s, state, pair.degraded, pair.residual)
            mean, _ = reverse_mean_sigma(s, state, pair.degraded, pair.residual, eps_hat)
            scale = s.bbar(t - 1) ** 2 / s.bbar(t)
            drift = pair.clean + s.abar(t - 1) * pair.residual - s.dbar(t - 1) * pair.degraded
            np.testing.assert_allclose(mean, drift + scale * eps, rtol=1e-9, atol=1e-12)

    def test_rejects_t0(self, rng):
        s = build_schedule(10, 0.1)
        img = np.zeros((2, 2, 3))
        with pytest.raises(ValueError):
            reverse_mean_sigma(s, DiffusionState(img, 0), img, img, img)


class TestImplicitSample:
    @pytest.mark.parametrize("strategy", ["noise_projected", "eq5_literal"])
    @pytest.mark.parametrize("S", [1, 2, 3, 10])
    def test_oracle_exact(self, rng, strategy, S):
        s = build_schedule(100, 0.1)
        pair = random_pair(rng)
        oracle = lambda latent, cond, t: pair.residual
        out = implicit_sample(s, oracle, pair.degraded, S=S, strategy=strategy, rng_seed=5)
        assert np.max(np.abs(out - pair.clean)) <= 1e-5

    def test_single_step_is_one_model_call(self, rng):
        s = build_schedule(50, 0.1)
        pair = random_pair(rng)
        calls = []

        def model(latent, cond, t):
            calls.append(t)
            return np.zeros_like(cond) + 0.125

        out = implicit_sample(s, model, pair.degraded, S=1, rng_seed=0)
        assert calls == [50]
        np.testing.assert_allclose(out, pair.degraded - 0.125, atol=1e-12)

    def test_zero_residual_oracle_returns_input(self, rng):
        s = build_schedule(30, 0.1)
        pair = random_pair(rng)
        out = implicit_sample(s, lambda l, c, t: np.zeros_like(c), pair.degraded, S=3, rng_seed=1)
        np.testing.assert_array_equal(out, pair.degraded)

    def test_nonfinite_model_output_aborts(self, rng):
        s = build_schedule(30, 0.1)
        pair = random_pair(rng)
        bad = lambda l, c, t: np.full_like(c, np.nan)
        with pytest.raises(RuntimeError, match="non-finite"):
            implicit_sample(s, bad, pair.degraded, S=2, rng_seed=1)

    def test_rejects_bad_steps_and_strategy(self, rng):
        s = build_schedule(30, 0.1)
        pair = random_pair(rng)
        oracle = lambda l, c, t: pair.residual
        with pytest.raises(ValueError):
            implicit_sample(s, oracle, pair.degraded, S=0)
        with pytest.raises(ValueError):
            implicit_sample(s, oracle, pair.degraded, S=31)
        with pytest.raises(ValueError):
            implicit_sample(s, oracle, pair.degraded, S=3, strategy="magic")

    def test_timesteps_cover_endpoints(self):
        assert sampling_timesteps(100, 1) == [100]
        assert sampling_timesteps(100, 2) == [100, 1]
        assert sampling_timesteps(100, 3) == [100, 50, 1]
        ts = sampling_timesteps(100, 10)
        assert ts[0] == 100 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_torch_numpy_same_noise(self):
        a = seeded_noise_like(np.zeros((3, 3, 3)), 42)
        b = seeded_noise_like(torch.zeros(3, 3, 3, dtype=torch.float64), 42)
        np.testing.assert_array_equal(a, b.numpy())


class TestResidualLoss:
    def test_zero_when_equal(self, rng):
        x = rng.standard_normal((4, 4, 3))
        assert residual_loss(x, x.copy()) == 0.0

    def test_constant_gap(self):
        assert residual_loss(np.zeros((5, 5, 3)), np.ones((5, 5, 3))) == pytest.approx(1.0)

    def test_matches_scalar_oracle(self, rng):
        a = rng.standard_normal((6, 6, 3))
        b = rng.standard_normal((6, 6, 3))
        manual = np.mean([abs(a[idx] - b[idx]) for idx in np.ndindex(a.shape)])
        assert residual_loss(a, b) == pytest.approx(manual, rel=1e-12)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            residual_loss(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


@settings(max_examples=30, deadline=None)
@given(
    t_frac=st.floats(0.01, 1.0),
    seed=st.integers(0, 10_000),
    bbT=st.floats(0.05, 1.0),
)
def test_property_roundtrip_noise_recovery(t_frac, seed, bbT):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 120))
    t = max(1, int(round(t_frac * T)))
    s = build_schedule(T, bbT)
    pair = random_pair(rng)
    eps = rng.standard_normal(pair.clean.shape)
    state = forward_sample(s, pair, t, eps)
    rec = estimate_noise(s, state, pair.degraded, pair.residual)
    np.testing.assert_allclose(rec, eps, rtol=1e-6, atol=1e-7)
