import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opento.diffusion import (NoiseSchedule, OracleDenoiser, cfg_velocity, cosine_schedule, ddim_step, ddpm_mean,
                              ddpm_step, forward, oracle_reconstruction_errors, posterior_variance, predict_x0_eps,
                              sample, timesteps, velocity_target)

S = cosine_schedule(1000)


def test_schedule_endpoints_and_monotonicity():
    ab = S.alpha_bar
    assert ab.size == 1001 and ab[0] == 1.0 and ab[-1] == 1e-5
    assert np.all(np.diff(ab) <= 0)
    unclipped = ab > 1e-5
    assert np.all(np.diff(ab[unclipped]) < 0)
    assert unclipped.sum() >= 990


def test_schedule_midpoint_closed_form():
    s = 0.008
    expected = math.cos((0.5 + s) / (1 + s) * math.pi / 2) ** 2 / math.cos(s / (1 + s) * math.pi / 2) ** 2
    assert S[500] == pytest.approx(expected, rel=1e-14)


def test_schedule_validation():
    with pytest.raises(ValueError):
        cosine_schedule(0)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0, 0.5, 0.7]))
    assert cosine_schedule(1).T == 1


def test_forward_endpoints(rng):
    z0, eps = rng.standard_normal((2, 8, 8))
    np.testing.assert_array_equal(forward(z0, eps, 0, S), z0)
    limit = NoiseSchedule(np.array([1.0, 1e-300]))
    np.testing.assert_allclose(forward(z0, eps, 1, limit), eps, atol=1e-149)
    with pytest.raises(ValueError):
        forward(z0, eps[:4], 3, S)


def test_forward_second_moment_monte_carlo():
    r = np.random.default_rng(0)
    z0 = r.standard_normal(256)
    t = 300
    eps = r.standard_normal((4000, 256))
    zt = forward(np.broadcast_to(z0, eps.shape), eps, t, S)
    expected = S[t] * z0 @ z0 + (1 - S[t]) * 256
    assert np.mean(np.sum(zt**2, axis=1)) == pytest.approx(expected, rel=0.01)


def test_velocity_at_alpha_one(rng):
    z0, eps = rng.standard_normal((2, 5))
    np.testing.assert_array_equal(velocity_target(z0, eps, 0, S), eps)


@settings(max_examples=50)
@given(t=st.integers(0, 1000), seed=st.integers(0, 2**31))
def test_velocity_round_trip(t, seed):
    r = np.random.default_rng(seed)
    z0, eps = r.standard_normal((2, 16))
    zt, v = forward(z0, eps, t, S), velocity_target(z0, eps, t, S)
    x0, e = predict_x0_eps(zt, v, t, S)
    np.testing.assert_allclose(x0, z0, atol=1e-12, rtol=0)
    np.testing.assert_allclose(e, eps, atol=1e-12, rtol=0)


def test_velocity_symbolic_expansion():
    # with a = sqrt(ab), b = sqrt(1-ab): v = a eps - b z0, z_t = a z0 + b eps
    ab = S[437]
    a, b = math.sqrt(ab), math.sqrt(1 - ab)
    z0, eps = np.array([0.3, -1.2]), np.array([2.0, 0.5])
    v = velocity_target(z0, eps, 437, S)
    assert v[0] == pytest.approx(a * 2.0 - b * 0.3, abs=1e-15)
    assert v[1] == pytest.approx(a * 0.5 + b * 1.2, abs=1e-15)
    zt = forward(z0, eps, 437, S)
    np.testing.assert_allclose(a * zt - b * v, z0, atol=1e-15)


def test_ddim_identity_and_order(rng):
    z = rng.standard_normal(10)
    np.testing.assert_array_equal(ddim_step(z, rng.standard_normal(10), 400, 400, S), z)
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 20, S)


def test_ddim_oracle_reconstruction_over_100_latents():
    errs = oracle_reconstruction_errors(100, steps=20, w=2.0, seed=3, shape=(64, 64, 1))
    assert errs.max() <= 1e-5


def test_full_length_ddim_with_oracle():
    z0 = np.random.default_rng(1).standard_normal((8, 8, 1))
    out = sample(OracleDenoiser(z0, S), steps=1000, w=1.0, seed=4, schedule=S, shape=z0.shape)
    assert np.max(np.abs(out - z0)) <= 1e-5


def test_sampling_is_deterministic():
    den = lambda z, t, c: 0.1 * z + (0.0 if c is None else 0.05)
    a, ta = sample(den, "c", steps=20, seed=11, shape=(4, 4), return_trajectory=True)
    b, tb = sample(den, "c", steps=20, seed=11, shape=(4, 4), return_trajectory=True)
    assert len(ta) == 21 and all(x.tobytes() == y.tobytes() for x, y in zip(ta, tb))
    c = sample(den, "c", steps=20, mode="ddpm", seed=11, shape=(4, 4))
    d = sample(den, "c", steps=20, mode="ddpm", seed=11, shape=(4, 4))
    assert c.tobytes() == d.tobytes()
    with pytest.raises(ValueError):
        sample(den, "c", mode="euler")


def test_guidance_irrelevant_when_oracle_ignores_condition():
    z0 = np.random.default_rng(2).standard_normal((6, 6))
    outs = [sample(OracleDenoiser(z0, S), "cond", steps=20, w=w, seed=9, schedule=S, shape=z0.shape)
            for w in (0.0, 1.0, 2.0, 7.5)]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-12)


def test_denoiser_call_count():
    z0 = np.zeros((3, 3))
    den = OracleDenoiser(z0, S)
    sample(den, "c", steps=20, w=2.0, schedule=S, shape=z0.shape)
    assert den.calls == 40
    den = OracleDenoiser(z0, S)
    sample(den, "c", steps=20, w=1.0, schedule=S, shape=z0.shape)
    assert den.calls == 20


def test_denoiser_failures_propagate():
    def broken(z, t, c):
        raise RuntimeError("boom")
    with pytest.raises(RuntimeError):
        sample(broken, steps=2, shape=(2,))


def test_cfg_cases(rng):
    vc, vu = rng.standard_normal((2, 7))
    np.testing.assert_array_equal(cfg_velocity(vc, vu, 1.0), vc)
    np.testing.assert_array_equal(cfg_velocity(vc, vu, 0.0), vu)
    np.testing.assert_allclose(cfg_velocity(vc, vu, 2.0), 2 * vc - vu, atol=1e-15)
    for w in (0.0, 0.5, 3.0):
        np.testing.assert_allclose(cfg_velocity(vc, vc, w), vc, atol=1e-15)
    with pytest.raises(ValueError):
        cfg_velocity(vc, vu, -1.0)


def test_timesteps():
    ts = timesteps(1000, 20)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 21 and np.all(np.diff(ts) == -50)
    np.testing.assert_array_equal(timesteps(10, 10), np.arange(10, -1, -1))
    with pytest.raises(ValueError):
        timesteps(10, 0)


def test_ddpm_final_step_is_deterministic(rng):
    assert posterior_variance(1, 0, S) == 0.0
    z, v = rng.standard_normal((2, 5))
    a = ddpm_step(z, v, 1, S, np.random.default_rng(0))
    b = ddpm_step(z, v, 1, S, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        ddpm_step(z, v, 0, S, rng)


def test_ddpm_zero_noise_is_posterior_mean(rng):
    z, v = rng.standard_normal((2, 5))
    np.testing.assert_array_equal(ddpm_step(z, v, 500, S, noise=np.zeros(5)), ddpm_mean(z, v, 500, S))
    with pytest.raises(ValueError):
        ddpm_step(z, v, 500, S)


def test_ddpm_mean_monte_carlo():
    r = np.random.default_rng(5)
    z, v = r.standard_normal((2, 3))
    draws = np.array([ddpm_step(z, v, 200, S, r) for _ in range(20000)])
    sd = math.sqrt(posterior_variance(200, 199, S))
    np.testing.assert_allclose(draws.mean(axis=0), ddpm_mean(z, v, 200, S), atol=5 * sd / math.sqrt(20000))
    assert draws.std(axis=0) == pytest.approx(np.full(3, sd), rel=0.03)


def test_ddpm_mean_matches_posterior_formula():
    # q(z_{t-1} | z_t, x0) mean written out from the one-step transition
    r = np.random.default_rng(6)
    z0, eps = r.standard_normal((2, 4))
    t = 321
    zt = forward(z0, eps, t, S)
    v = velocity_target(z0, eps, t, S)
    ab_t, ab_p = S[t], S[t - 1]
    alpha = ab_t / ab_p
    mean = (math.sqrt(ab_p) * (1 - alpha) * z0 + math.sqrt(alpha) * (1 - ab_p) * zt) / (1 - ab_t)
    np.testing.assert_allclose(ddpm_mean(zt, v, t, S), mean, atol=1e-12)
