import numpy as np
import pytest

from semdiff.diffusion import cosine_schedule, ddim_sample, ddim_step, predict_x0, q_sample, respace
from semdiff.exceptions import ConfigError, ContractError


def oracle_eps(x0, schedule):
    """Perfect denoiser: the exact noise that maps x0 to the current x_t."""
    def eps_fn(x_t, t):
        ab = schedule.alpha_bar[t]
        return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
    return eps_fn


class TestCosine:
    def test_first_value_matches_closed_form(self):
        s = cosine_schedule(1000)
        f = lambda t: np.cos(((t / 1000 + 0.008) / 1.008) * np.pi / 2) ** 2
        assert s.alpha_bar[0] >= 0.999
        assert abs(s.alpha_bar[0] - f(1) / f(0)) < 1e-15

    @pytest.mark.parametrize("T", [2, 10, 100, 1000])
    def test_monotone_and_bounded(self, T):
        s = cosine_schedule(T)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all(s.betas > 0) and np.all(s.betas <= 0.999)
        np.testing.assert_allclose(s.alphas, 1 - s.betas)
        assert s.T == T

    def test_too_short(self):
        with pytest.raises(ConfigError):
            cosine_schedule(1)


class TestQSample:
    def test_limits(self, rng):
        s = cosine_schedule(1000)
        x0, eps = rng.uniform(-1, 1, (3, 8, 8)), rng.standard_normal((3, 8, 8))
        assert np.abs(q_sample(x0, 0, eps, s) - x0).max() < 0.05
        assert np.abs(q_sample(x0, 999, eps, s) - eps).max() < 0.01
        np.testing.assert_array_equal(q_sample(x0, 500, np.zeros_like(x0), s), np.sqrt(s.alpha_bar[500]) * x0)

    def test_per_item_timesteps(self, rng):
        s = cosine_schedule(100)
        x0, eps = rng.standard_normal((4, 3, 2, 2)), rng.standard_normal((4, 3, 2, 2))
        t = np.array([0, 10, 50, 99])
        out = q_sample(x0, t, eps, s)
        for i in range(4):
            np.testing.assert_allclose(out[i], q_sample(x0[i], t[i], eps[i], s), atol=1e-15)

    def test_variance(self, rng):
        s = cosine_schedule(1000)
        eps = rng.standard_normal((10000,))
        var = q_sample(np.zeros(10000), 300, eps, s).var()
        assert abs(var / (1 - s.alpha_bar[300]) - 1) < 0.05

    def test_out_of_range(self):
        s = cosine_schedule(10)
        with pytest.raises(ContractError):
            q_sample(np.zeros(2), 10, np.zeros(2), s)


class TestDDIM:
    def test_true_eps_inverts(self, rng):
        s = cosine_schedule(1000)
        x0, eps = rng.uniform(-1, 1, (3, 4, 4)), rng.standard_normal((3, 4, 4))
        x_t = q_sample(x0, 600, eps, s)
        assert np.abs(ddim_step(x_t, eps, 600, -1, s) - x0).max() < 1e-9

    def test_zero_eps(self, rng):
        s = cosine_schedule(1000)
        x = rng.standard_normal(5)
        out = ddim_step(x, np.zeros(5), 700, 300, s)
        np.testing.assert_allclose(out, np.sqrt(s.alpha_bar[300] / s.alpha_bar[700]) * x, rtol=1e-12)

    def test_order_contract(self):
        s = cosine_schedule(10)
        with pytest.raises(ContractError):
            ddim_step(np.zeros(1), np.zeros(1), 3, 3, s)

    @pytest.mark.parametrize("steps", [1, 2, 5, 40])
    def test_oracle_recovers_x0(self, rng, steps):
        s = cosine_schedule(1000)
        x0 = rng.uniform(-1, 1, (3, 8, 8))
        out = ddim_sample(oracle_eps(x0, s), rng.standard_normal(x0.shape), respace(s, steps))
        assert np.abs(out - x0).max() < 1e-6

    def test_two_step_equals_forty(self, rng):
        s = cosine_schedule(1000)
        x0 = rng.uniform(-1, 1, (2, 4, 4))
        noise = rng.standard_normal(x0.shape)
        a = ddim_sample(oracle_eps(x0, s), noise, respace(s, 2))
        b = ddim_sample(oracle_eps(x0, s), noise, respace(s, 40))
        assert np.abs(a - b).max() < 1e-9

    def test_clipping_bounds_output(self, rng):
        s = cosine_schedule(100)
        out = ddim_sample(lambda x, t: np.zeros_like(x), 50 * rng.standard_normal(10), respace(s, 5), clip_x0=1.0)
        assert np.abs(out).max() <= 1.0

    def test_callback_sees_descending_steps(self):
        s = cosine_schedule(100)
        seen = []
        ddim_sample(lambda x, t: np.zeros_like(x), np.ones(2), respace(s, 4), callback=lambda t, x: seen.append(t))
        assert seen == sorted(seen, reverse=True) and seen[0] == 99

    def test_predict_x0_inverse(self, rng):
        s = cosine_schedule(50)
        x0, eps = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_allclose(predict_x0(q_sample(x0, 20, eps, s), eps, 20, s), x0, atol=1e-12)


class TestRespace:
    def test_identity(self):
        s = cosine_schedule(50)
        np.testing.assert_array_equal(respace(s, 50).timesteps, np.arange(50))

    def test_single(self):
        assert respace(cosine_schedule(1000), 1).timesteps.tolist() == [999]

    def test_forty(self):
        ts = respace(cosine_schedule(1000), 40).timesteps
        assert len(ts) == 40 and ts[-1] == 999 and np.all(np.diff(ts) > 0)
        assert 1000 / len(ts) == 25

    def test_exact_length_for_all_k(self):
        s = cosine_schedule(200)
        for k in range(1, 201):
            ts = respace(s, k).timesteps
            assert len(ts) == k and len(set(ts.tolist())) == k and ts[-1] == 199 and ts.min() >= 0

    @pytest.mark.parametrize("k", [0, 1001])
    def test_out_of_range(self, k):
        with pytest.raises(ConfigError):
            respace(cosine_schedule(1000), k)
