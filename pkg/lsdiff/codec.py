"""
Latent codecs: the pixel <-> latent boundary.

Pixels are ``[0, 1]`` everywhere inside lsdiff. A codec whose native range is
``[-1, 1]`` converts at this boundary in ``encode``/``decode`` and nowhere else.
"""
import math
import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from lsdiff.errors import ShapeMismatch, ConfigMismatch
from lsdiff.media import VideoClip, LatentVolume, check_finite

logger = logging.getLogger(__name__)


class LatentCodec(nn.Module):
    """
    Interface. ``encode`` maps ``[N, C, H, W]`` pixels in [0, 1] to
    ``[N, latent_channels, H / scale, W / scale]``; ``decode`` is the inverse map.
    """
    scale: int = 1
    latent_channels: int = 3
    image_channels: int = 3
    trainable: bool = False

    def encode(self, frames: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError("LatentCodec is abstract")

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError("LatentCodec is abstract")


class IdentityCodec(LatentCodec):
    def __init__(self, image_channels: int = 3):
        super().__init__()
        self.scale = 1
        self.image_channels = image_channels
        self.latent_channels = image_channels

    def encode(self, frames):
        return frames.clone()

    def decode(self, latents):
        return latents.clone()


class PixelUnshuffleCodec(LatentCodec):
    """Exact space-to-depth codec, ``C * scale**2`` latent channels."""

    def __init__(self, scale: int = 8, image_channels: int = 3):
        super().__init__()
        self.scale = scale
        self.image_channels = image_channels
        self.latent_channels = image_channels * scale * scale

    def encode(self, frames):
        return F.pixel_unshuffle(frames * 2.0 - 1.0, self.scale)

    def decode(self, latents):
        return (F.pixel_shuffle(latents, self.scale) + 1.0) / 2.0


class ToyAutoencoderCodec(LatentCodec):
    """
    Small trainable convolutional autoencoder, one stride-2 stage per factor of
    two in ``scale``. The runner fits it for reconstruction before diffusion
    training starts (see ``lsdiff.runner.fit_codec``).
    """
    trainable = True

    def __init__(self, scale: int = 8, latent_channels: int = 4, image_channels: int = 3, hidden: int = 32):
        super().__init__()
        n_down = int(round(math.log2(scale)))
        assert 2 ** n_down == scale, "scale must be a power of two"
        self.scale = scale
        self.latent_channels = latent_channels
        self.image_channels = image_channels

        enc = [nn.Conv2d(image_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(hidden, latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(hidden, image_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def encode(self, frames):
        return self.encoder(frames * 2.0 - 1.0)

    def decode(self, latents):
        return (self.decoder(latents) + 1.0) / 2.0


class DiffusersVaeCodec(LatentCodec):
    """
    Optional adapter around a pretrained ``diffusers.AutoencoderKL``
    (e.g. the image VAE shipped with stable video diffusion). diffusers is not a
    hard dependency; it is imported only when this codec is built.
    """

    def __init__(self, name_or_path: str, subfolder: Optional[str] = "vae", scaling_factor: float = 0.18215):
        super().__init__()
        from diffusers import AutoencoderKL
        self.vae = AutoencoderKL.from_pretrained(name_or_path, subfolder=subfolder)
        self.vae.requires_grad_(False)
        self.scale = 2 ** (len(self.vae.config.block_out_channels) - 1)
        self.latent_channels = self.vae.config.latent_channels
        self.image_channels = self.vae.config.in_channels
        self.scaling_factor = scaling_factor

    def encode(self, frames):
        return self.vae.encode(frames * 2.0 - 1.0).latent_dist.mode() * self.scaling_factor

    def decode(self, latents):
        return (self.vae.decode(latents / self.scaling_factor).sample + 1.0) / 2.0


def build_codec(name: str, image_channels: int = 3, scale: int = 8, latent_channels: int = 4, **kwargs) -> LatentCodec:
    if name == "identity":
        return IdentityCodec(image_channels)
    elif name == "unshuffle":
        return PixelUnshuffleCodec(scale, image_channels)
    elif name == "toy":
        return ToyAutoencoderCodec(scale, latent_channels, image_channels, **kwargs)
    elif name == "diffusers":
        return DiffusersVaeCodec(**kwargs)
    else:
        raise ConfigMismatch(f"unknown codec '{name}'")


def encode_frames(frames: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """Encode ``[..., C, H, W]`` frames (any leading dims) without tracking gradients."""
    lead = frames.shape[:-3]
    c, h, w = frames.shape[-3:]
    if h % codec.scale or w % codec.scale:
        raise ShapeMismatch(f"{h}x{w} frames are not divisible by codec scale {codec.scale}")
    if c != codec.image_channels:
        raise ShapeMismatch(f"codec expects {codec.image_channels} channels, got {c}")
    with torch.no_grad():
        z = codec.encode(frames.reshape(-1, c, h, w))
    return z.reshape(*lead, *z.shape[1:])


def decode_latents(latents: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    lead = latents.shape[:-3]
    with torch.no_grad():
        x = codec.decode(latents.reshape(-1, *latents.shape[-3:]))
    return x.reshape(*lead, *x.shape[1:])


def pixel_to_latent(clip: VideoClip, codec: LatentCodec) -> LatentVolume:
    check_finite(clip.frames, "frames")
    z = encode_frames(clip.frames, codec)
    return LatentVolume(z, codec.scale)


def latent_to_pixel(latents: LatentVolume, codec: LatentCodec, fps: float) -> VideoClip:
    check_finite(latents.data, "latents")
    x = decode_latents(latents.data, codec)
    if not isinstance(codec, IdentityCodec):
        x = x.clamp(0.0, 1.0)
    return VideoClip(x, fps)
