import math

import numpy as np
import pytest
import torch

from videopure.errors import ScheduleError, ShapeError
from videopure.schedule import (alpha_bar_at, ddim_sigma_sq, effective_beta,
                                forward_diffuse, forward_diffuse_markov,
                                make_linear_schedule, predict_z0, respace)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule()


@pytest.fixture(scope="module")
def rsched(sched):
    return respace(sched, 50)


def reference_alpha_bar(t_train=1000, beta_min=1e-4, beta_max=2e-2):
    # independent recomputation, kept deliberately dumb
    out = [1.0]
    for i in range(t_train):
        beta = beta_min + (beta_max - beta_min) * i / (t_train - 1)
        out.append(out[-1] * (1.0 - beta))
    return np.array(out)


def test_linear_schedule_tables(sched):
    assert sched.t_train == 1000
    assert sched.beta[0] == 0.0 and sched.alpha_bar[0] == 1.0
    assert sched.beta[1] == pytest.approx(1e-4)
    assert sched.beta[1000] == pytest.approx(2e-2)
    ref = reference_alpha_bar()
    np.testing.assert_allclose(sched.alpha_bar, ref, rtol=1e-12)
    assert sched.alpha_bar[1000] == pytest.approx(4.035829765375676e-05, rel=1e-12)
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_respace_even_ladder(sched, rsched):
    assert rsched.t_ddim == 50
    np.testing.assert_array_equal(rsched.steps, np.arange(0, 1001, 20))
    np.testing.assert_array_equal(rsched.alpha_bar, sched.alpha_bar[rsched.steps])
    assert rsched.index_of(120) == 6
    assert rsched.contains(120) and not rsched.contains(121)
    with pytest.raises(ScheduleError):
        rsched.index_of(121)


def test_respace_rejects_bad_sizes(sched):
    with pytest.raises(ScheduleError):
        respace(sched, 0)
    with pytest.raises(ScheduleError):
        respace(sched, 1001)


def test_forward_predict_round_trip_float64(sched):
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 8, 8, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, 2, generator=gen, dtype=torch.float64)
    for t in (1, 120, 500, 1000):
        zt = forward_diffuse(z0, t, eps, sched)
        back = predict_z0(zt, eps, t, sched)
        assert float((back - z0).abs().max()) < 1e-12


def test_forward_diffuse_preserves_dtype(sched):
    z0 = torch.zeros(2, 4, 4, 1)
    eps = torch.ones(2, 4, 4, 1)
    out = forward_diffuse(z0, 500, eps, sched)
    assert out.dtype == torch.float32
    assert float(out.mean()) == pytest.approx(math.sqrt(1 - sched.alpha_bar[500]), rel=1e-6)


def test_markov_chain_matches_closed_form_moments(sched):
    # the step-by-step chain and the closed-form jump agree in distribution;
    # with z0 = 0 the result is exactly gaussian so first/second moments suffice
    gen = torch.Generator().manual_seed(1)
    t = 40
    n = 400
    z0 = torch.zeros(n, dtype=torch.float64)
    noises = [torch.randn(n, generator=gen, dtype=torch.float64) for _ in range(t)]
    zt = forward_diffuse_markov(z0, t, noises, sched)
    assert float(zt.mean()) == pytest.approx(0.0, abs=0.2)
    assert float(zt.var()) == pytest.approx(1 - sched.alpha_bar[t], rel=0.25)


def test_markov_chain_validates_lengths(sched):
    with pytest.raises(ShapeError):
        forward_diffuse_markov(torch.zeros(3), 5, [torch.zeros(3)] * 4, sched)


def test_effective_beta_matches_ratio(rsched):
    for t in (20, 120, 1000):
        k = rsched.index_of(t)
        want = 1.0 - rsched.alpha_bar[k] / rsched.alpha_bar[k - 1]
        assert effective_beta(rsched, t) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ScheduleError):
        effective_beta(rsched, 0)


def test_sigma_sq_from_first_principles(rsched):
    ab = reference_alpha_bar()
    for t in (40, 120, 500, 1000):
        k = t // 20
        beta_hat = 1.0 - ab[t] / ab[t - 20]
        want = math.log((1 - ab[t - 20]) / (1 - ab[t])) * beta_hat
        assert ddim_sigma_sq(t, rsched) == pytest.approx(want, rel=1e-10)
        assert ddim_sigma_sq(t, rsched) < 0
    assert ddim_sigma_sq(120, rsched) == pytest.approx(-0.0146684, abs=1e-6)


def test_sigma_sq_first_step_substitute(rsched):
    # alpha_bar_prev = 1 at the first ladder point would make the log diverge;
    # the substitute policy reuses the second point's value
    assert ddim_sigma_sq(20, rsched) == ddim_sigma_sq(40, rsched)
    with pytest.raises(ScheduleError):
        ddim_sigma_sq(20, rsched, first_step="raw")
    with pytest.raises(ScheduleError):
        ddim_sigma_sq(0, rsched)
    with pytest.raises(ScheduleError):
        ddim_sigma_sq(120, rsched, first_step="bogus")


def test_alpha_bar_at_bounds(sched, rsched):
    assert alpha_bar_at(sched, 0) == 1.0
    assert alpha_bar_at(rsched, 1000) == pytest.approx(sched.alpha_bar[1000])
    with pytest.raises(ScheduleError):
        alpha_bar_at(sched, 1001)
    with pytest.raises(ScheduleError):
        alpha_bar_at(rsched, 30)
