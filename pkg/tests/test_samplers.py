import pytest
import torch

from videopure.errors import ConfigError, NumericError, ScheduleError, ShapeError
from videopure.samplers import (SamplerConfig, ddim_invert_step, ddim_step,
                                ddpm_step, run_denoise, run_inversion)
from videopure.schedule import make_linear_schedule, respace


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule()


@pytest.fixture(scope="module")
def rsched(sched):
    return respace(sched, 50)


class ConstEps:
    """Noise predictor that ignores its input; makes DDIM exactly invertible."""

    def __init__(self, value):
        self.value = value

    def __call__(self, z, t):
        return self.value.to(z.dtype)


class FrameTagEps:
    """Marks each frame's prediction with its index, to observe broadcasting."""

    def __call__(self, z, t):
        out = torch.zeros(z.shape)
        for i in range(z.shape[0]):
            out[i] = float(i)
        return out


def test_sampler_config_validation(sched, rsched):
    with pytest.raises(ConfigError):
        SamplerConfig("ddim", 6, sched)  # needs the respaced ladder
    with pytest.raises(ConfigError):
        SamplerConfig("ddpm", 6, rsched)
    with pytest.raises(ConfigError):
        SamplerConfig("ddim", 51, rsched)
    with pytest.raises(ConfigError):
        SamplerConfig("mystery", 6, rsched)


def test_const_model_round_trip(rsched):
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 8, 8, 2, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, 2, generator=gen, dtype=torch.float64)
    model = ConstEps(eps)
    cfg = SamplerConfig("ddim", 6, rsched)
    z_up = run_inversion(z0, cfg, model)
    back = run_denoise(z_up, cfg, model)
    assert float((back - z0).abs().max()) < 1e-8


def test_temporal_inversion_broadcasts_frame0(rsched):
    z_prev = torch.zeros(4, 8, 8, 1)
    z = ddim_invert_step(z_prev, 0, 20, FrameTagEps(), rsched, temporal=True)
    # frame 0's eps is zero, so all frames must move identically (not at all)
    assert torch.equal(z[0], z[1]) and torch.equal(z[0], z[3])
    z_plain = ddim_invert_step(z_prev, 0, 20, FrameTagEps(), rsched, temporal=False)
    assert not torch.equal(z_plain[0], z_plain[1])


def test_temporal_inversion_keeps_frame_variance_zero(rsched):
    # identical frames + shared eps: the noised latent stays frame-constant
    gen = torch.Generator().manual_seed(1)
    frame = torch.randn(1, 8, 8, 1, generator=gen)
    z0 = frame.expand(6, 8, 8, 1).clone()

    class Net:
        def __call__(self, z, t):
            gen2 = torch.Generator().manual_seed(t)
            return torch.randn(z.shape, generator=gen2)

    cfg = SamplerConfig("ddim", 6, rsched)
    z_up = run_inversion(z0, cfg, Net(), temporal=True)
    var_across_frames = z_up.var(dim=0)
    assert float(var_across_frames.max()) == 0.0


def test_run_denoise_is_bit_exact_deterministic(rsched):
    gen = torch.Generator().manual_seed(2)
    z = torch.randn(4, 8, 8, 1, generator=gen)
    eps = torch.randn(4, 8, 8, 1, generator=gen)
    cfg = SamplerConfig("ddim", 6, rsched)
    a = run_denoise(z, cfg, ConstEps(eps))
    b = run_denoise(z, cfg, ConstEps(eps))
    assert torch.equal(a, b)


def test_step_hook_sees_every_ladder_step_and_can_replace(rsched):
    z = torch.zeros(2, 4, 4, 1)
    eps = torch.zeros(2, 4, 4, 1)
    seen = []

    def hook(t, z_t, eps_hat, z0_t):
        seen.append(t)
        return z_t + 1.0

    cfg = SamplerConfig("ddim", 3, rsched)
    out = run_denoise(z, cfg, ConstEps(eps), step_hook=hook)
    assert seen == [60, 40, 20]
    assert float(out.mean()) > 0  # replacements fed the next transition


def test_step_hook_shape_check(rsched):
    def hook(t, z_t, eps_hat, z0_t):
        return torch.zeros(1, 1, 1, 1)

    cfg = SamplerConfig("ddim", 2, rsched)
    with pytest.raises(ShapeError):
        run_denoise(torch.zeros(2, 4, 4, 1), cfg, ConstEps(torch.zeros(2, 4, 4, 1)),
                    step_hook=hook)


def test_ddpm_step_needs_noise_above_t1(sched):
    z = torch.zeros(2, 4, 4, 1)
    model = ConstEps(torch.zeros(2, 4, 4, 1))
    out = ddpm_step(z, 1, model, sched, noise=None)  # fine: t=1 adds no noise
    assert out.shape == z.shape
    with pytest.raises(ConfigError):
        ddpm_step(z, 5, model, sched, noise=None)
    with pytest.raises(ShapeError):
        ddpm_step(z, 5, model, sched, noise=torch.zeros(1, 4, 4, 1))


def test_ddpm_denoise_reproducible_with_seeded_generator(sched):
    gen = torch.Generator().manual_seed(3)
    z = torch.randn(2, 4, 4, 1, generator=gen)
    model = ConstEps(torch.zeros(2, 4, 4, 1))
    cfg = SamplerConfig("ddpm", 10, sched)
    a = run_denoise(z, cfg, model, generator=torch.Generator().manual_seed(7))
    b = run_denoise(z, cfg, model, generator=torch.Generator().manual_seed(7))
    c = run_denoise(z, cfg, model, generator=torch.Generator().manual_seed(8))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    with pytest.raises(ConfigError):
        run_denoise(z, cfg, model)  # generator is mandatory for t_star > 1


def test_ddim_step_direction_checks(rsched):
    z = torch.zeros(2, 4, 4, 1)
    model = ConstEps(torch.zeros(2, 4, 4, 1))
    with pytest.raises(ScheduleError):
        ddim_step(z, 20, 40, model, rsched)
    with pytest.raises(ScheduleError):
        ddim_invert_step(z, 40, 20, model, rsched)


def test_non_finite_model_output_is_caught(rsched):
    z = torch.zeros(2, 4, 4, 1)
    bad = ConstEps(torch.full((2, 4, 4, 1), float("inf")))
    with pytest.raises(NumericError):
        ddim_step(z, 40, 20, bad, rsched)
