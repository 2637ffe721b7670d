import math

import numpy as np
import pytest
import torch

from lsdiff.errors import DiffusionError, ShapeMismatch
from lsdiff.diffusion import (DiffusionState, LossWeights, NoiseSchedule, add_noise, cfg_combine, denoise, dsm_loss,
                              edm_loss_weight, initial_noise, precondition, sample, sample_training_sigma)


@pytest.mark.parametrize("sigma", np.logspace(-4, 2, 100).tolist())
def test_precondition_identities(sigma):
    c = precondition(sigma, 0.5)
    assert abs(c.c_in ** 2 * (sigma ** 2 + 0.25) - 1) < 1e-10
    assert abs(c.c_skip - 0.25 / (sigma ** 2 + 0.25)) < 1e-10
    assert abs(c.c_noise - math.log(sigma) / 4) < 1e-10


def test_precondition_small_sigma_limits():
    c = precondition(1e-9)
    assert abs(c.c_skip - 1) < 1e-10
    assert abs(c.c_out) < 1e-8


def test_precondition_tensor_matches_scalar():
    sig = torch.tensor([0.01, 1.0, 50.0], dtype=torch.float64)
    c = precondition(sig)
    for i, s in enumerate(sig.tolist()):
        assert abs(float(c.c_out[i]) - precondition(s).c_out) < 1e-12


def test_precondition_rejects_nonpositive_sigma():
    with pytest.raises(DiffusionError) as e:
        precondition(0.0)
    assert e.value.code == "INVALID_SIGMA"
    with pytest.raises(DiffusionError):
        precondition(torch.tensor([1.0, -1.0]))


def test_schedule_is_decreasing_and_ends_at_zero():
    sched = NoiseSchedule(0.002, 80.0, 7.0, 15)
    s = sched.sigmas()
    assert len(s) == 16
    assert abs(float(s[0]) - 80.0) < 1e-9
    assert abs(float(s[14]) - 0.002) < 1e-12
    assert float(s[-1]) == 0.0
    assert (s[1:] < s[:-1]).all()


def test_schedule_validation():
    with pytest.raises(DiffusionError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(DiffusionError):
        NoiseSchedule(num_steps=0)


def test_loss_weights():
    assert abs(edm_loss_weight(1.0) - (1 + 0.25) / 0.25) < 1e-12
    assert LossWeights("uniform")(3.0) == 1.0
    with pytest.raises(DiffusionError) as e:
        LossWeights("bogus")(1.0)
    assert e.value.code == "CONFIG_MISMATCH"


def test_add_noise_returns_the_noise():
    z0 = torch.randn(2, 3, 4, 5, 5)
    z_t, n = add_noise(z0, torch.tensor([0.5, 2.0]), torch.Generator().manual_seed(0))
    assert torch.allclose(z_t - z0, n)


def test_training_sigma_is_lognormal():
    s = sample_training_sigma(100000, torch.Generator().manual_seed(0))
    log_s = s.log()
    assert abs(float(log_s.mean()) + 1.2) < 0.02
    assert abs(float(log_s.std()) - 1.2) < 0.02


def test_oracle_drives_loss_to_zero(oracle_net):
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn(3, 2, 4, 4, 4, generator=g, dtype=torch.float64)
    sigma = torch.tensor([0.002, 0.7, 60.0], dtype=torch.float64)
    z_t, _ = add_noise(z0, sigma, g)
    loss = dsm_loss(z0, DiffusionState(z_t, sigma), None, oracle_net(z0))
    assert float(loss) <= 1e-10


@pytest.mark.parametrize("steps", [1, 2, 15])
def test_sampler_recovers_oracle_target(oracle_net, steps):
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(1, 3, 4, 4, 4, generator=g, dtype=torch.float64)
    noise = initial_noise(z0.shape, g, dtype=torch.float64)
    out = sample(noise, None, oracle_net(z0), NoiseSchedule(num_steps=steps))
    assert (out - z0).abs().max() < 1e-5


def test_sampler_trajectory_length(oracle_net):
    z0 = torch.zeros(1, 1, 1, 2, 2, dtype=torch.float64)
    _, traj = sample(torch.ones_like(z0), None, oracle_net(z0), NoiseSchedule(num_steps=4), return_trajectory=True)
    assert len(traj) == 5
    assert torch.allclose(traj[0], torch.ones_like(z0) * 80.0)


def test_dsm_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(3)
    z0 = torch.randn(1, 1, 1, 2, 2, generator=g, dtype=torch.float64)
    z_t, _ = add_noise(z0, 0.8, g)
    state = DiffusionState(z_t, 0.8)

    def loss_of(w):
        return dsm_loss(z0, state, None, lambda x, cond, c_noise: w * x)

    assert torch.autograd.gradcheck(loss_of, (torch.randn(1, 1, 1, 2, 2, dtype=torch.float64, requires_grad=True),),
                                    eps=1e-6, atol=1e-6, rtol=1e-4)


def test_denoise_checks_network_output_shape():
    state = DiffusionState(torch.zeros(1, 2, 1, 2, 2), 1.0)
    with pytest.raises(ShapeMismatch):
        denoise(state, None, lambda x, c, n: torch.zeros(1, 2, 1, 2, 3))


def test_cfg_combine():
    c, u = torch.full((2,), 3.0), torch.full((2,), 1.0)
    assert torch.equal(cfg_combine(c, u, 1.0), c)
    assert torch.equal(cfg_combine(c, u, 0.0), u)
    assert torch.allclose(cfg_combine(c, u, 3.0), torch.full((2,), 7.0))
    with pytest.raises(ShapeMismatch):
        cfg_combine(c, torch.zeros(3), 2.0)


def _zero_net(x_in, cond, c_noise):
    return torch.zeros_like(x_in)


def test_zero_net_sampler_shrinks_every_step():
    schedule = NoiseSchedule(num_steps=10)
    noise = initial_noise((1, 2, 3, 4, 4), torch.Generator().manual_seed(5), dtype=torch.float64)
    out, traj = sample(noise, None, _zero_net, schedule, return_trajectory=True)
    norms = [float(x.norm()) for x in traj]
    assert all(b < a for a, b in zip(norms, norms[1:]))

    expected = noise * 80.0
    sigmas = schedule.sigmas().tolist()
    for s_cur, s_next in zip(sigmas[:-1], sigmas[1:]):
        c_skip = 0.25 / (s_cur ** 2 + 0.25)
        expected = expected + (s_next - s_cur) * (1 - c_skip) * expected / s_cur
    assert torch.allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_sample_is_bit_identical_for_a_fixed_seed():
    from lsdiff.conditions import ConditionBundle
    from lsdiff.unet import ModelFactory, UNetConfig

    torch.manual_seed(0)
    unet, guider = ModelFactory.build(UNetConfig(down_channels=(8, 16), latent_channels=4, audio_dim=6,
                                                 time_embed_dim=16))
    ids = guider(torch.rand(1, 3, 8, 8), torch.zeros(1, 1, 8, 8))
    cond = ConditionBundle(ids, torch.randn(1, 3, 3, 6), torch.randn(1, 3, 4, 8, 8))

    def run(seed):
        noise = initial_noise((1, 3, 4, 8, 8), torch.Generator().manual_seed(seed))
        return sample(noise, cond, unet, NoiseSchedule(num_steps=4), scale=2.5)

    first = run(11)
    assert torch.equal(first, run(11))
    assert not torch.equal(first, run(12))
