"""
EDM-preconditioned diffusion core.

The denoiser is ``D(z_t) = c_skip * z_t + c_out * F(c_in * z_t, cond; c_noise)``
trained with a sigma-weighted squared error to the clean latent, and sampled with
a deterministic first-order (Euler) solver on the Karras sigma schedule.

Tensors flowing through here are batched latents ``[B, F, C, H, W]``; sigma is a
python float or a ``[B]`` tensor (one noise level per sample).
"""
import math
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

from lsdiff.errors import DiffusionError, ShapeMismatch

logger = logging.getLogger(__name__)

Sigma = Union[float, torch.Tensor]


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: Sigma
    c_out: Sigma
    c_in: Sigma
    c_noise: Sigma


def precondition(sigma: Sigma, sigma_data: float = 0.5) -> PreconditionCoeffs:
    if sigma_data <= 0:
        raise DiffusionError(f"sigma_data must be positive, got {sigma_data}")
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise DiffusionError("sigma must be positive")
        denom = sigma ** 2 + sigma_data ** 2
        return PreconditionCoeffs(
            c_skip=sigma_data ** 2 / denom,
            c_out=sigma * sigma_data / denom.sqrt(),
            c_in=1 / denom.sqrt(),
            c_noise=sigma.log() / 4,
        )
    if not sigma > 0:
        raise DiffusionError(f"sigma must be positive, got {sigma}")
    denom = sigma ** 2 + sigma_data ** 2
    return PreconditionCoeffs(
        c_skip=sigma_data ** 2 / denom,
        c_out=sigma * sigma_data / math.sqrt(denom),
        c_in=1 / math.sqrt(denom),
        c_noise=math.log(sigma) / 4,
    )


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    num_steps: int = 15

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise DiffusionError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.num_steps < 1:
            raise DiffusionError(f"num_steps must be >= 1, got {self.num_steps}")

    def sigmas(self) -> torch.Tensor:
        """``num_steps`` strictly decreasing levels from sigma_max to sigma_min, then 0."""
        if self.num_steps == 1:
            steps = torch.tensor([self.sigma_max], dtype=torch.float64)
        else:
            i = torch.arange(self.num_steps, dtype=torch.float64)
            inv_rho = 1 / self.rho
            steps = (self.sigma_max ** inv_rho
                     + i / (self.num_steps - 1) * (self.sigma_min ** inv_rho - self.sigma_max ** inv_rho)) ** self.rho
        return torch.cat([steps, torch.zeros(1, dtype=torch.float64)])


@dataclass(frozen=True)
class LossWeights:
    """``kind='edm'``: (sigma^2 + sigma_d^2) / (sigma * sigma_d)^2; ``'uniform'``: 1."""
    kind: str = "edm"
    sigma_data: float = 0.5

    def __call__(self, sigma: Sigma) -> Sigma:
        if self.kind == "edm":
            return (sigma ** 2 + self.sigma_data ** 2) / (sigma * self.sigma_data) ** 2
        elif self.kind == "uniform":
            return torch.ones_like(sigma) if isinstance(sigma, torch.Tensor) else 1.0
        raise DiffusionError(f"unknown loss weighting '{self.kind}'", code="CONFIG_MISMATCH")


def edm_loss_weight(sigma: Sigma, sigma_data: float = 0.5) -> Sigma:
    return LossWeights("edm", sigma_data)(sigma)


@dataclass
class DiffusionState:
    z_t: torch.Tensor
    sigma: Sigma
    step_index: int = 0


def _per_sample(value: Sigma, like: torch.Tensor) -> Sigma:
    """Broadcast a per-sample ``[B]`` tensor over the remaining dims of ``like``."""
    if isinstance(value, torch.Tensor) and value.dim() > 0:
        return value.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return value


def add_noise(z0: torch.Tensor, sigma: Sigma, generator: Optional[torch.Generator] = None):
    """Returns ``(z_t, n)`` with ``n ~ N(0, sigma^2)`` and ``z_t = z0 + n``."""
    if isinstance(sigma, torch.Tensor):
        assert (sigma >= 0).all(), "sigma must be nonnegative"
    else:
        assert sigma >= 0, "sigma must be nonnegative"
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    n = eps * _per_sample(sigma, z0)
    return z0 + n, n


def sample_training_sigma(batch_size: int,
                          generator: Optional[torch.Generator] = None,
                          p_mean: float = -1.2,
                          p_std: float = 1.2) -> torch.Tensor:
    """Log-normal training noise levels, one per sample."""
    return (torch.randn(batch_size, generator=generator) * p_std + p_mean).exp()


def denoise(state: DiffusionState, cond, net: Callable, sigma_data: float = 0.5) -> torch.Tensor:
    z_t = state.z_t
    masked = getattr(cond, "masked_latents", None)
    if masked is not None and masked.shape != z_t.shape:
        raise ShapeMismatch(f"masked latents {tuple(masked.shape)} vs noisy latents {tuple(z_t.shape)}")
    c = precondition(state.sigma, sigma_data)
    f = net(z_t * _per_sample(c.c_in, z_t), cond, c.c_noise)
    if f.shape != z_t.shape:
        raise ShapeMismatch(f"network returned {tuple(f.shape)}, expected {tuple(z_t.shape)}")
    return _per_sample(c.c_skip, z_t) * z_t + _per_sample(c.c_out, z_t) * f


def dsm_loss(z0: torch.Tensor,
             state: DiffusionState,
             cond,
             net: Callable,
             weights: LossWeights = LossWeights(),
             sigma_data: float = 0.5) -> torch.Tensor:
    """lambda(sigma) * ||D(z_t) - z0||^2, mean over batch, frames, channels and pixels."""
    d = denoise(state, cond, net, sigma_data)
    per_sample = ((d - z0) ** 2).flatten(1).mean(dim=1)
    lam = weights(state.sigma)
    if isinstance(lam, torch.Tensor):
        lam = lam.to(per_sample.dtype).reshape(-1)
    return (lam * per_sample).mean()


def cfg_combine(cond_out: torch.Tensor, uncond_out: torch.Tensor, scale: float) -> torch.Tensor:
    if cond_out.shape != uncond_out.shape:
        raise ShapeMismatch(f"{tuple(cond_out.shape)} vs {tuple(uncond_out.shape)}")
    if scale == 1:
        return cond_out
    if scale == 0:
        return uncond_out
    return uncond_out + scale * (cond_out - uncond_out)


def initial_noise(shape, generator: Optional[torch.Generator] = None, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=generator, dtype=dtype)


@torch.no_grad()
def sample(noise: torch.Tensor,
           cond,
           net: Callable,
           schedule: NoiseSchedule = NoiseSchedule(),
           scale: float = 1.0,
           sigma_data: float = 0.5,
           return_trajectory: bool = False):
    """
    Euler sampling. ``noise`` is unit-variance and is scaled by sigma_max here.
    The unconditional branch (used when ``scale != 1``) is ``cond.unconditional()``:
    audio and reference zeroed, masked video kept.
    """
    sigmas = schedule.sigmas()
    uncond = cond.unconditional() if (scale != 1 and cond is not None) else None
    x = noise * float(sigmas[0])
    trajectory = [x]
    for i in range(schedule.num_steps):
        s_cur, s_next = float(sigmas[i]), float(sigmas[i + 1])
        state = DiffusionState(x, s_cur, i)
        d = denoise(state, cond, net, sigma_data)
        if uncond is not None:
            d = cfg_combine(d, denoise(state, uncond, net, sigma_data), scale)
        x = x + (s_next - s_cur) * (x - d) / s_cur
        if return_trajectory:
            trajectory.append(x)
    if return_trajectory:
        return x, trajectory
    return x
