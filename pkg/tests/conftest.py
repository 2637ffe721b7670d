import math

import pytest
import torch

from lsdiff.diffusion import precondition
from lsdiff.environment import RunConfig, parse_config
from lsdiff.data import make_synthetic_clip


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training tests")


def _per_sample(v, like):
    if isinstance(v, torch.Tensor) and v.dim() > 0:
        return v.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return v


class OracleNet:
    """
    Inverts the preconditioning so that the denoiser output is exactly ``z0``.
    The noise level is read back from ``c_noise = log(sigma) / 4``.
    """

    def __init__(self, z0: torch.Tensor, sigma_data: float = 0.5):
        self.z0 = z0
        self.sigma_data = sigma_data

    def __call__(self, x_in, cond, c_noise):
        if isinstance(c_noise, torch.Tensor):
            sigma = torch.exp(4 * c_noise.double())
        else:
            sigma = math.exp(4 * c_noise)
        c = precondition(sigma, self.sigma_data)
        z_t = x_in / _per_sample(c.c_in, x_in)
        return (self.z0 - _per_sample(c.c_skip, x_in) * z_t) / _per_sample(c.c_out, x_in)


class FrameLocalNet:
    """Output of each frame depends on that frame's inputs only."""

    def __call__(self, x_in, cond, c_noise):
        audio = cond.audio.mean(dim=(-1, -2)).to(x_in.dtype)
        return torch.tanh(x_in) * 0.5 + 0.1 * cond.masked_latents.to(x_in.dtype) \
            + 0.05 * audio[..., None, None, None] + 0.01 * float(c_noise)


@pytest.fixture
def oracle_net():
    return OracleNet


@pytest.fixture
def frame_local_net():
    return FrameLocalNet()


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return parse_config(overrides={
        "seed": 0,
        "output_dir": str(tmp_path / "runs"),
        "unet": {"down_channels": [8, 16], "attn_heads": 2, "audio_dim": 16, "time_embed_dim": 32,
                 "spatial_attention": [False, False]},
        "train": {"resolution": 32, "frames_per_clip": 8, "synthetic_frames": 12, "batch_size": 2,
                  "steps": 6, "lr": 1e-3, "log_interval": 1, "checkpoint_interval": 100},
        "infer": {"segment_len": 8, "overlap": 2, "steps": 2},
    })


@pytest.fixture
def synthetic_clip():
    return make_synthetic_clip(num_frames=20, size=64, fps=25.0, seed=3)
