import numpy as np
import pytest
import torch

from lsdiff.errors import ConfigMismatch, ShapeMismatch
from lsdiff.conditions import ConditionBundle, IdFeaturePyramid
from lsdiff.unet import (DenoisingUNet, ModelFactory, TemporalAttention, UNetConfig, UNetOutput, count_parameters,
                         timestep_embedding)


def _config(**kw):
    base = dict(down_channels=(8, 16), attn_heads=2, latent_channels=4, audio_dim=6, time_embed_dim=16)
    base.update(kw)
    return UNetConfig(**base)


def _inputs(unet, guider, b=2, f=3, size=8, k=1):
    lat = unet.config.latent_channels
    ids = guider(torch.rand(b, 3, size, size), torch.zeros(b, 1, size, size))
    cond = ConditionBundle(ids, torch.randn(b, f, 2 * k + 1, unet.config.audio_dim), torch.randn(b, f, lat, size, size))
    return torch.randn(b, f, lat, size, size), cond


def test_conv_in_takes_noisy_and_masked_latents():
    unet = DenoisingUNet(_config())
    assert unet.conv_in.in_channels == 8


@pytest.mark.parametrize("size,frames", [(8, 1), (8, 4), (12, 2)])
def test_forward_preserves_shape(size, frames):
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config())
    noisy, cond = _inputs(unet, guider, f=frames, size=size)
    out = unet(noisy, cond, torch.tensor([0.1, -0.3]))
    assert out.shape == noisy.shape
    assert torch.isfinite(out).all()


def test_scalar_noise_level_broadcasts():
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config())
    noisy, cond = _inputs(unet, guider)
    a = unet(noisy, cond, 0.25)
    b = unet(noisy, cond, torch.tensor([0.25, 0.25]))
    assert torch.allclose(a, b, atol=1e-6)


def test_audio_attention_maps():
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config(layers_per_block=2))
    noisy, cond = _inputs(unet, guider, b=1, f=2, k=2)
    out = unet(noisy, cond, 0.0, return_attention=True)
    assert isinstance(out, UNetOutput)
    assert len(out.audio_attentions) == 2 * 2 * 2
    first = out.audio_attentions[0]
    assert first.shape == (2, 64, 5)
    assert torch.allclose(first.sum(dim=-1), torch.ones(2, 64), atol=1e-5)


def test_forward_rejects_bad_conditions():
    unet, guider = ModelFactory.build(_config())
    noisy, cond = _inputs(unet, guider)
    bad_audio = ConditionBundle(cond.id_features, torch.randn(2, 3, 3, 5), cond.masked_latents)
    with pytest.raises(ShapeMismatch):
        unet(noisy, bad_audio, 0.0)
    bad_ids = ConditionBundle(IdFeaturePyramid((torch.zeros(2, 4, 8, 8), torch.zeros(2, 16, 4, 4))),
                              cond.audio, cond.masked_latents)
    with pytest.raises(ConfigMismatch):
        unet(noisy, bad_ids, 0.0)
    with pytest.raises(ShapeMismatch):
        unet(noisy[:, :, :2], cond, 0.0)


def test_config_validation():
    with pytest.raises(ConfigMismatch):
        UNetConfig(down_channels=()).validate()
    with pytest.raises(ConfigMismatch):
        UNetConfig(down_channels=(32, 16)).validate()
    with pytest.raises(ConfigMismatch):
        UNetConfig(down_channels=(9, 18), attn_heads=2).validate()
    with pytest.raises(ConfigMismatch):
        UNetConfig(down_channels=(8, 16), spatial_attention=(True,)).validate()
    assert UNetConfig(down_channels=[8, 16]).down_channels == (8, 16)


def test_spatial_attention_flags():
    unet = DenoisingUNet(_config(spatial_attention=(False, True)))
    assert unet.down_layers[0][0].self_attn is None
    assert unet.down_layers[1][0].self_attn is not None


def test_save_and_load_pretrained(tmp_path):
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config())
    unet.save_pretrained(str(tmp_path / "unet"))
    loaded = DenoisingUNet.from_pretrained(str(tmp_path / "unet"))
    assert loaded.config == unet.config
    noisy, cond = _inputs(unet, guider)
    assert torch.equal(loaded(noisy, cond, 0.1), unet(noisy, cond, 0.1))


def test_guider_mirrors_down_path():
    unet, guider = ModelFactory.build(_config(), latent_scale=1)
    assert [c.out_channels for c in guider.outputs] == [8, 16]
    assert count_parameters(unet) > count_parameters(guider) > 0


def test_count_parameters_closed_form():
    assert count_parameters(torch.nn.Conv2d(4, 8, 3)) == 4 * 8 * 9 + 8
    assert count_parameters(torch.nn.Sequential()) == 0


def test_zero_initialised_guider_matches_dropped_reference():
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config())
    noisy, cond = _inputs(unet, guider)
    dropped = ConditionBundle(cond.id_features.zeroed(), cond.audio, cond.masked_latents)
    assert torch.equal(unet(noisy, cond, 0.3), unet(noisy, dropped, 0.3))


def test_frame_permutation_equivariance_without_temporal_attention():
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config(use_temporal=False))
    noisy, cond = _inputs(unet, guider, b=1, f=5)
    perm = torch.tensor([3, 0, 4, 1, 2])
    permuted = ConditionBundle(cond.id_features, cond.audio[:, perm], cond.masked_latents[:, perm])
    out = unet(noisy, cond, 0.1)
    out_perm = unet(noisy[:, perm], permuted, 0.1)
    assert torch.allclose(out_perm, out[:, perm], atol=1e-5)


def test_gradients_reach_every_condition_path():
    torch.manual_seed(0)
    unet, guider = ModelFactory.build(_config())
    noisy, cond = _inputs(unet, guider)
    unet(noisy, cond, 0.1).pow(2).mean().backward()
    groups = {
        "audio": [p for n, p in unet.named_parameters() if "audio_attn" in n],
        "temporal": [p for n, p in unet.named_parameters() if "temporal_attn" in n],
        "id": list(guider.outputs.parameters()),
    }
    for name, params in groups.items():
        norm = sum(float(p.grad.norm()) for p in params if p.grad is not None)
        assert norm > 0, name


def _random_config(rng):
    heads = int(rng.integers(1, 5))
    levels = int(rng.integers(1, 4))
    channels = np.cumsum(rng.integers(0, 3, size=levels)) + int(rng.integers(1, 4))
    return UNetConfig(down_channels=tuple(int(c) * heads for c in channels),
                      attn_heads=heads,
                      temporal_window=int(rng.integers(0, 3)),
                      latent_channels=int(rng.integers(1, 6)),
                      audio_dim=int(rng.integers(1, 9)),
                      layers_per_block=int(rng.integers(1, 3)),
                      time_embed_dim=int(rng.integers(4, 33)),
                      spatial_attention=tuple(bool(s) for s in rng.integers(0, 2, size=levels)),
                      use_temporal=bool(rng.integers(0, 2)))


def test_forward_over_random_valid_configs():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    for _ in range(50):
        config = _random_config(rng)
        unet, guider = ModelFactory.build(config)
        b, f = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        size, k = int(rng.integers(3, 11)), int(rng.integers(0, 3))
        noisy, cond = _inputs(unet, guider, b=b, f=f, size=size, k=k)
        with torch.no_grad():
            out = unet(noisy, cond, torch.randn(b))
        assert out.shape == noisy.shape, config
        assert torch.isfinite(out).all(), config


def test_timestep_embedding_odd_width():
    emb = timestep_embedding(torch.tensor([0.0, 1.5, -2.0]), 7)
    assert emb.shape == (3, 7)
    assert torch.equal(emb[:, -1], torch.zeros(3))
    assert torch.equal(emb[:, :6], timestep_embedding(torch.tensor([0.0, 1.5, -2.0]), 6))


def test_temporal_attention_with_odd_channels():
    torch.manual_seed(0)
    attn = TemporalAttention(9, heads=3)
    x = torch.randn(2 * 4, 9, 3, 3)
    assert attn(x, num_frames=4).shape == x.shape
    unet, guider = ModelFactory.build(_config(down_channels=(9, 15), attn_heads=3, time_embed_dim=15))
    noisy, cond = _inputs(unet, guider, f=4, size=6)
    assert unet(noisy, cond, 0.2).shape == noisy.shape
