from types import SimpleNamespace

import numpy as np
import pytest

from nit.diffusion import (
    GuidanceConfig,
    SamplerConfig,
    TimeSampler,
    add_noise,
    cfg_velocity,
    euler_sample,
    fm_loss,
    fm_loss_grad,
    velocity_target,
)
from nit.packing import build_cu_seqlens
from nit.tokenizer import ShapeError


class TestTimeSampler:
    def test_zero_spread_gives_half(self):
        t = TimeSampler(p_mean=0.0, p_std=0.0, seed=0).sample(100)
        np.testing.assert_array_equal(t, np.full(100, 0.5))

    def test_median_matches_sigmoid_of_mean(self):
        for p_mean in (0.0, 1.0, -0.5):
            t = TimeSampler(p_mean=p_mean, p_std=1.0, seed=1).sample(100_000)
            expected = 1.0 / (1.0 + np.exp(-p_mean))
            assert abs(np.median(t) - expected) < 0.02

    def test_open_interval(self):
        t = TimeSampler(seed=2).sample(100_000)
        assert (t > 0).all() and (t < 1).all()

    def test_negative_spread_rejected(self):
        with pytest.raises(ValueError):
            TimeSampler(p_std=-1.0)


class TestPath:
    def test_t0_is_data(self):
        rng = np.random.default_rng(0)
        x, eps = rng.standard_normal((2, 5, 3))
        np.testing.assert_array_equal(add_noise(x, eps, 0.0), x)

    def test_t1_is_noise(self):
        rng = np.random.default_rng(1)
        x, eps = rng.standard_normal((2, 5, 3))
        np.testing.assert_array_equal(add_noise(x, eps, 1.0), eps)

    def test_quarter_point(self):
        assert add_noise(np.array([4.0]), np.array([0.0]), 0.25) == pytest.approx(3.0)

    def test_path_consistency_identity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 4))
        eps = rng.standard_normal((8, 4))
        for t, tp in ((0.9, 0.1), (0.5, 0.25), (1.0, 0.0)):
            lhs = add_noise(x, eps, t) - add_noise(x, eps, tp)
            rhs = (t - tp) * (eps - x)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_t_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            add_noise(np.zeros(2), np.zeros(2), 1.5)


class TestVelocityTarget:
    def test_noise_equals_data_gives_zero(self):
        x = np.random.default_rng(3).standard_normal((4, 2))
        assert not velocity_target(x, x).any()

    def test_zero_data_gives_noise(self):
        eps = np.random.default_rng(4).standard_normal((4, 2))
        np.testing.assert_array_equal(velocity_target(np.zeros_like(eps), eps), eps)

    def test_matches_path_derivative(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 3))
        eps = rng.standard_normal((6, 3))
        h = 1e-7
        fd = (add_noise(x, eps, 0.5 + h) - add_noise(x, eps, 0.5 - h)) / (2 * h)
        np.testing.assert_allclose(fd, velocity_target(x, eps), atol=1e-6)


class TestLoss:
    def test_perfect_prediction(self):
        pred = np.random.default_rng(6).standard_normal((6, 3))
        assert fm_loss(pred, pred, build_cu_seqlens([2, 4])) == 0.0

    def test_unit_offset(self):
        target = np.random.default_rng(7).standard_normal((6, 3))
        assert fm_loss(target + 1.0, target, build_cu_seqlens([2, 4])) == pytest.approx(1.0)

    def test_per_instance_oracle(self):
        rng = np.random.default_rng(8)
        counts = [2, 5, 3]
        cu = build_cu_seqlens(counts)
        pred = rng.standard_normal((10, 4))
        target = rng.standard_normal((10, 4))
        expected = np.mean(
            [np.mean((pred[s:e] - target[s:e]) ** 2) for s, e in zip(cu[:-1], cu[1:])]
        )
        assert fm_loss(pred, target, cu) == pytest.approx(expected, abs=1e-12)

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        cu = build_cu_seqlens([3, 2])
        pred = rng.standard_normal((5, 2))
        target = rng.standard_normal((5, 2))
        grad = fm_loss_grad(pred, target, cu)
        eps = 1e-7
        for idx in [(0, 0), (2, 1), (4, 0)]:
            bumped = pred.copy()
            bumped[idx] += eps
            fd = (fm_loss(bumped, target, cu) - fm_loss(pred, target, cu)) / eps
            assert grad[idx] == pytest.approx(fd, abs=1e-6)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            fm_loss(np.zeros((3, 2)), np.zeros((4, 2)), build_cu_seqlens([3]))


class TestGuidance:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.v_cond = rng.standard_normal((6, 4)).astype(np.float32)
        self.v_uncond = rng.standard_normal((6, 4)).astype(np.float32)

    def test_scale_one_is_conditional_everywhere(self):
        g = GuidanceConfig(scale=1.0, t_lo=0.0, t_hi=1.0)
        for t in (0.0, 0.3, 1.0):
            out = cfg_velocity(self.v_cond, self.v_uncond, g, t)
            assert out is self.v_cond  # bit-identical, no arithmetic applied

    def test_outside_interval_is_conditional(self):
        g = GuidanceConfig(scale=2.25, t_lo=0.0, t_hi=0.7)
        out = cfg_velocity(self.v_cond, self.v_uncond, g, 0.9)
        assert out is self.v_cond

    def test_inside_interval_mixes(self):
        g = GuidanceConfig(scale=2.25, t_lo=0.0, t_hi=0.7)
        out = cfg_velocity(self.v_cond, self.v_uncond, g, 0.5)
        expected = self.v_uncond + 2.25 * (self.v_cond - self.v_uncond)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_reference_256px_config_accepted(self):
        g = GuidanceConfig(scale=2.25, t_lo=0.0, t_hi=0.7)
        assert (g.scale, g.t_lo, g.t_hi) == (2.25, 0.0, 0.7)

    def test_scale_below_one_rejected(self):
        with pytest.raises(ValueError):
            GuidanceConfig(scale=0.5)

    def test_bad_interval_rejected(self):
        with pytest.raises(ValueError):
            GuidanceConfig(scale=2.0, t_lo=0.8, t_hi=0.2)


class _StubModel:
    """Minimal velocity model for sampler contract tests."""

    def __init__(self, token_dim, velocity_fn):
        self.config = SimpleNamespace(patch_size=1, token_dim=token_dim)
        self._fn = velocity_fn

    def forward(self, tokens, cu, hw_list, t, labels):
        return self._fn(tokens, float(t[0])), None


class TestEulerSampler:
    def test_zero_velocity_returns_initial_noise(self):
        model = _StubModel(4, lambda x, t: np.zeros_like(x))
        expected = np.random.default_rng(7).standard_normal((6, 4)).astype(np.float32)
        for steps in (1, 2):
            lat = euler_sample(
                model, (2, 3), None, SamplerConfig(num_steps=steps, seed=7)
            )
            got = lat.data.transpose(1, 2, 0).reshape(6, 4)
            np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_exact_velocity_inverts_path_in_one_step(self):
        rng = np.random.default_rng(11)
        x_star = rng.standard_normal((6, 4)).astype(np.float32)
        model = _StubModel(4, lambda x, t: x - x_star if t == 1.0 else 0 * x)
        lat = euler_sample(model, (2, 3), None, SamplerConfig(num_steps=1, seed=5))
        # One Euler step with v = eps - x* maps the initial noise to x*.
        got = lat.data.transpose(1, 2, 0).reshape(6, 4)
        np.testing.assert_allclose(got, x_star, atol=1e-6)

    def test_native_shape_contract(self):
        model = _StubModel(3, lambda x, t: np.zeros_like(x))
        for h, w in ((5, 9), (1, 1), (16, 4)):
            lat = euler_sample(model, (h, w), None, SamplerConfig(num_steps=1, seed=0))
            assert lat.data.shape == (3, h, w)

    def test_seed_determinism(self):
        model = _StubModel(3, lambda x, t: 0.1 * x)
        a = euler_sample(model, (3, 3), None, SamplerConfig(num_steps=4, seed=9))
        b = euler_sample(model, (3, 3), None, SamplerConfig(num_steps=4, seed=9))
        np.testing.assert_array_equal(a.data, b.data)

    def test_indivisible_shape_rejected(self):
        model = _StubModel(4, lambda x, t: x)
        model.config = SimpleNamespace(patch_size=2, token_dim=4)
        with pytest.raises(ShapeError):
            euler_sample(model, (3, 4), None, SamplerConfig(num_steps=1, seed=0))
