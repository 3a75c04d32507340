import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from panodiff import schedule as S
from panodiff.numerics import Rng

F64 = torch.float64


@pytest.fixture(scope="module")
def sched():
    return S.make_schedule(1000, 1e-4, 2e-2)


def test_single_step_schedule():
    s = S.make_schedule(1, 0.5, 0.5)
    assert s.alpha_bar[1] == 0.5 and s.sigma[1] == math.sqrt(0.5)


def test_alpha_bar_matches_product_oracle(sched):
    prod = 1.0
    for k in range(1000):
        beta = 1e-4 + (2e-2 - 1e-4) * k / 999
        prod *= 1.0 - beta
    assert abs(sched.alpha_bar[1000] - prod) < 1e-15
    assert abs(sched.alpha_bar[1000] - 4.035829e-05) < 1e-9


def test_identities_and_monotonicity(sched):
    t = np.arange(1, 1001)
    assert np.max(np.abs(sched.alpha_bar[t] + sched.sigma[t] ** 2 - 1)) < 1e-12
    assert np.all(np.diff(sched.alpha_bar[t]) < 0)
    assert np.all(np.diff(sched.sigma[t]) > 0)
    assert np.all(np.diff(sched.lam[t]) < 0)


@pytest.mark.parametrize("bad", [(0, 1e-4, 2e-2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 1e-4, 1.0)])
def test_invalid_range(bad):
    with pytest.raises(S.ScheduleError):
        S.make_schedule(*bad)


def test_noise_hand_value():
    s = S.make_schedule(1, 0.75, 0.75)  # alpha_bar = 0.25
    out = S.add_noise_image(s, torch.ones(1, dtype=F64), torch.ones(1, dtype=F64), 1)
    assert abs(out.item() - (0.5 + math.sqrt(0.75))) < 1e-15


def test_noise_zero_eps(sched):
    x0 = Rng(0).normal((3, 4), dtype=F64)
    for t in (1, 500, 1000):
        out = S.add_noise_image(sched, x0, torch.zeros_like(x0), t)
        assert torch.equal(out, math.sqrt(sched.alpha_bar[t]) * x0)
        assert torch.equal(S.add_noise_map(sched, x0, torch.zeros_like(x0), t), out)


def test_noise_near_clean_limit(sched):
    r = Rng(1)
    x0, eps = r.child("x").normal((100,), dtype=F64), r.child("e").normal((100,), dtype=F64)
    out = S.add_noise_image(sched, x0, eps, 1)
    assert (out - x0).norm() <= 3 * sched.sigma[1] * eps.norm() + (1 - math.sqrt(sched.alpha_bar[1])) * x0.norm()


def test_per_sample_timesteps(sched):
    x0 = torch.ones(2, 3, dtype=F64)
    out = S.add_noise_image(sched, x0, torch.zeros_like(x0), np.array([1, 1000]))
    assert torch.allclose(out[0], x0[0] * math.sqrt(sched.alpha_bar[1]))
    assert torch.allclose(out[1], x0[1] * math.sqrt(sched.alpha_bar[1000]))


def test_out_of_range_timestep(sched):
    with pytest.raises(S.ScheduleError):
        S.add_noise_image(sched, torch.ones(1), torch.ones(1), 0)
    with pytest.raises(S.ScheduleError):
        S.add_noise_image(sched, torch.ones(1), torch.ones(1), 1001)


def test_stepwise_equals_closed_form_without_noise(sched):
    x0 = Rng(2).normal((5,), dtype=F64)
    x = x0.clone()
    for t in range(1, 1001):
        x = math.sqrt(sched.alpha[t]) * x  # forward step with zero noise
        if t in (1, 10, 500, 1000):
            closed = S.add_noise_image(sched, x0, torch.zeros_like(x0), t)
            assert torch.max(torch.abs(x - closed)) < 1e-10


def test_map_noise_std_monte_carlo(sched):
    n = 10_000
    m0 = torch.ones(n, 8, dtype=F64)
    eps_m = 2.0 * Rng(3).normal((n, 8), dtype=F64)
    out = S.add_noise_map(sched, m0, eps_m, 1000)
    std = out.std(dim=0)
    target = 2.0 * sched.sigma[1000]
    assert torch.all(torch.abs(std - target) < 0.05 * target)


def test_map_noise_spec_warns_below_one():
    with pytest.warns(UserWarning):
        S.MapNoiseSpec(0.5)
    with pytest.raises(S.ScheduleError):
        S.MapNoiseSpec(0.0)
    assert S.MapNoiseSpec().std == 2.0


def test_sample_timesteps():
    assert (S.sample_timesteps(Rng(0), 1, 50) == 1).all()
    draws = S.sample_timesteps(Rng(0), 1000, 100_000)
    assert draws.min() >= 1 and draws.max() <= 1000
    assert abs(draws.mean() - 500.5) < 0.01 * 500.5
    assert np.array_equal(S.sample_timesteps(Rng(9), 1000, 20), S.sample_timesteps(Rng(9), 1000, 20))


def test_fractional_coeffs_consistent(sched):
    for t in (0.5, 1.5, 17.25, 999.9):
        a, s, lam = sched.coeffs(t)
        assert abs(a * a + s * s - 1) < 1e-12
        assert abs(lam - math.log(a / s)) < 1e-10


@settings(max_examples=50, deadline=None)
@given(t=st.floats(1.0, 1000.0))
def test_lambda_inverse(t):
    sched = S.make_schedule()
    assert abs(sched.timestep_for_lambda(sched.lambda_at(t)) - t) < 1e-6


def test_sign_preservation_worse_with_std_two(sched):
    # common random numbers: the same eps feeds both scales
    n = 10_000
    ids = Rng(4).integers(0, 255, size=(n,))
    from panodiff.bitcodec import encode_map
    m0 = encode_map(ids, F64)
    eps = Rng(5).normal(m0.shape, dtype=F64)
    keep1 = torch.sign(S.add_noise_map(sched, m0, 1.0 * eps, 1000)) == m0
    keep2 = torch.sign(S.add_noise_map(sched, m0, 2.0 * eps, 1000)) == m0
    assert keep2.float().mean() < keep1.float().mean()
