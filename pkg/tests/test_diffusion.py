"""Schedule, forward/reverse step, and DDIM sampler tests against direct oracles."""

import numpy as np
import pytest
import torch

from latentad.diffusion import (
    NoiseSchedule,
    build_linear_schedule,
    ddim_sample,
    ddim_timesteps,
    ddpm_reverse_step,
    estimate_x0,
    forward_diffuse,
    training_loss,
)


def cumprod_oracle(T, beta_start, beta_end):
    # Independent cumulative-product recomputation with explicit loops.
    if T == 1:
        betas = [beta_start]
    else:
        betas = [beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)]
    bars = []
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
        bars.append(prod)
    return np.array(betas), np.array(bars)


class TestLinearSchedule:
    def test_single_step(self):
        s = build_linear_schedule(1, 0.5, 0.5)
        assert s.betas.tolist() == [0.5]
        assert s.alpha_bars.tolist() == [0.5]

    def test_t1000_final_alpha_bar(self):
        s = build_linear_schedule(1000, 1e-4, 0.02)
        _, bars = cumprod_oracle(1000, 1e-4, 0.02)
        assert abs(s.alpha_bars[999] - bars[999]) < 1e-12
        assert s.alpha_bars[999] < 1e-2

    def test_t10_elementwise_oracle(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        betas, bars = cumprod_oracle(10, 1e-4, 0.02)
        np.testing.assert_allclose(s.betas, betas, rtol=0, atol=1e-15)
        np.testing.assert_allclose(s.alpha_bars, bars, rtol=1e-12, atol=0)

    def test_alpha_bars_strictly_decreasing_bounded(self):
        for T in (2, 10, 100, 1000):
            s = build_linear_schedule(T, 1e-4, 0.02)
            assert (np.diff(s.alpha_bars) < 0).all()
            assert ((s.alpha_bars > 0) & (s.alpha_bars < 1)).all()

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            build_linear_schedule(0, 1e-4, 0.02)
        with pytest.raises(ValueError):
            build_linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_linear_schedule(10, 0.02, 1e-4)
        with pytest.raises(ValueError):
            build_linear_schedule(10, 0.5, 1.0)

    def test_invariant_enforced_in_constructor(self):
        with pytest.raises(ValueError):
            NoiseSchedule(
                T=2,
                betas=np.array([0.1, 0.2]),
                alphas=np.array([0.9, 0.8]),
                alpha_bars=np.array([0.5, 0.6]),  # increasing: invalid
                sigmas=np.array([0.3, 0.4]),
            )


class TestForwardDiffuse:
    def test_zero_noise_limit(self):
        # alpha_bar ~ 1 is approached with a tiny beta at t=0.
        s = build_linear_schedule(10, 1e-12, 1e-12)
        z0 = torch.randn(4, 8, 8, dtype=torch.float64)
        out = forward_diffuse(z0, 0, torch.zeros_like(z0), s)
        torch.testing.assert_close(out, z0, rtol=0, atol=1e-6)

    def test_zero_signal(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        e = torch.randn(2, 4, 4, dtype=torch.float64)
        out = forward_diffuse(torch.zeros_like(e), 3, e, s)
        expected = np.sqrt(1.0 - s.alpha_bars[3]) * e
        torch.testing.assert_close(out, expected)

    def test_formula_oracle(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        g = torch.Generator().manual_seed(7)
        z0 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        _, bars = cumprod_oracle(10, 1e-4, 0.02)
        expected = np.sqrt(bars[3]) * z0 + np.sqrt(1 - bars[3]) * eps
        out = forward_diffuse(z0, 3, eps, s)
        torch.testing.assert_close(out, expected, rtol=1e-12, atol=1e-14)

    def test_rejects_bad_inputs(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        z0 = torch.zeros(2, 3, 3)
        with pytest.raises(ValueError):
            forward_diffuse(z0, 10, torch.zeros_like(z0), s)
        with pytest.raises(ValueError):
            forward_diffuse(z0, -1, torch.zeros_like(z0), s)
        with pytest.raises(ValueError):
            forward_diffuse(z0, 3, torch.zeros(2, 3, 4), s)


class TestDdpmReverseStep:
    def test_zero_prediction_closed_form(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        z = torch.randn(3, 5, 5, dtype=torch.float64)
        out = ddpm_reverse_step(z, 4, torch.zeros_like(z), s, torch.zeros_like(z))
        torch.testing.assert_close(out, z / np.sqrt(s.alphas[4]))

    def test_single_step_inversion(self):
        s = build_linear_schedule(1, 0.5, 0.5)
        g = torch.Generator().manual_seed(1)
        z0 = torch.randn(4, 6, 6, generator=g, dtype=torch.float64)
        e = torch.randn(4, 6, 6, generator=g, dtype=torch.float64)
        z1 = forward_diffuse(z0, 0, e, s)
        rec = ddpm_reverse_step(z1, 0, e, s, torch.zeros_like(z1))
        torch.testing.assert_close(rec, z0, rtol=0, atol=1e-6)

    def test_formula_oracle(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        g = torch.Generator().manual_seed(3)
        z = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
        eps = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
        noise = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
        t = 5
        a = 1.0 - (1e-4 + (0.02 - 1e-4) * t / 9)
        _, bars = cumprod_oracle(10, 1e-4, 0.02)
        expected = (z - (1 - a) / np.sqrt(1 - bars[t]) * eps) / np.sqrt(a) + np.sqrt(1 - a) * noise
        out = ddpm_reverse_step(z, t, eps, s, noise)
        torch.testing.assert_close(out, expected, rtol=1e-12, atol=1e-13)

    def test_nonzero_noise_at_t0_rejected(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        z = torch.zeros(1, 2, 2)
        with pytest.raises(ValueError):
            ddpm_reverse_step(z, 0, torch.zeros_like(z), s, torch.ones_like(z))


class TestDdimSample:
    def test_timestep_spacing(self):
        s = build_linear_schedule(1000, 1e-4, 0.02)
        ts = ddim_timesteps(s, 10)
        assert ts[0] == 999 and ts[-1] == 0
        assert len(ts) == 10
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert ddim_timesteps(s, 1) == [999]
        assert ddim_timesteps(build_linear_schedule(10, 1e-4, 0.02), 10) == list(range(9, -1, -1))
        with pytest.raises(ValueError):
            ddim_timesteps(s, 1001)

    def test_zero_predictor_closed_form(self):
        s = build_linear_schedule(100, 1e-4, 0.02)
        g = torch.Generator().manual_seed(11)
        zT = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        out = ddim_sample(zT, lambda z, t, c: torch.zeros_like(z), s, 10)
        # With eps == 0 the first clean-latent projection is z_T / sqrt(ab_{T-1})
        # and every later step reproduces it exactly.
        torch.testing.assert_close(out, zT / np.sqrt(s.alpha_bars[99]), rtol=1e-12, atol=1e-12)

    def test_exact_eps_inversion(self):
        T = 50
        s = build_linear_schedule(T, 1e-4, 0.02)
        g = torch.Generator().manual_seed(5)
        z0 = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        zT = forward_diffuse(z0, T - 1, eps, s)
        out = ddim_sample(zT, lambda z, t, c: eps, s, T)
        torch.testing.assert_close(out, z0, rtol=0, atol=1e-5)

    def test_bitwise_determinism(self):
        s = build_linear_schedule(100, 1e-4, 0.02)

        def predictor(z, t, c):
            g = torch.Generator().manual_seed(t)
            return torch.randn(z.shape, generator=g, dtype=z.dtype)

        zT = torch.randn(2, 4, 4, generator=torch.Generator().manual_seed(0))
        a = ddim_sample(zT, predictor, s, 10)
        b = ddim_sample(zT.clone(), predictor, s, 10)
        assert torch.equal(a, b)

    def test_predictor_shape_mismatch(self):
        s = build_linear_schedule(10, 1e-4, 0.02)
        zT = torch.zeros(1, 2, 2)
        with pytest.raises(ValueError):
            ddim_sample(zT, lambda z, t, c: torch.zeros(1, 2, 3), s, 2)

    def test_start_t_truncates_trajectory(self):
        s = build_linear_schedule(100, 1e-4, 0.02)
        assert ddim_timesteps(s, 5, start_t=49)[0] == 49
        assert ddim_timesteps(s, 10, start_t=4) == [4, 3, 2, 1, 0]


class TestTrainingLoss:
    def test_identity_is_zero(self):
        x = torch.randn(3, 4, 4)
        assert training_loss(x, x).item() == 0.0

    def test_unit_offset(self):
        ones = torch.ones(2, 3, 3)
        assert training_loss(ones, torch.zeros_like(ones)).item() == pytest.approx(1.0)

    def test_mse_oracle(self):
        g = torch.Generator().manual_seed(9)
        a = torch.randn(3, 5, 5, generator=g, dtype=torch.float64)
        b = torch.randn(3, 5, 5, generator=g, dtype=torch.float64)
        expected = float(np.mean((a.numpy() - b.numpy()) ** 2))
        assert abs(training_loss(a, b).item() - expected) < 1e-12

    def test_symmetry_and_zero_iff_equal(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(20):
            a = torch.randn(2, 3, 3, generator=g)
            b = torch.randn(2, 3, 3, generator=g)
            assert training_loss(a, b).item() == pytest.approx(training_loss(b, a).item())
            if not torch.equal(a, b):
                assert training_loss(a, b).item() > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            training_loss(torch.zeros(2, 2), torch.zeros(2, 3))


class TestRoundTripInvariant:
    def test_one_shot_x0_estimate(self):
        s = build_linear_schedule(1000, 1e-4, 0.02)
        g = torch.Generator().manual_seed(42)
        rng = np.random.default_rng(42)
        for _ in range(100):
            t = int(rng.integers(0, 1000))
            z0 = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
            eps = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
            zt = forward_diffuse(z0, t, eps, s)
            rec = estimate_x0(zt, t, eps, s)
            torch.testing.assert_close(rec, z0, rtol=0, atol=1e-6)
