import os
import json
import math
import logging
from os import path
from dataclasses import dataclass, asdict
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from lsdiff.errors import ConfigMismatch, ShapeMismatch
from lsdiff.conditions import ConditionBundle, IdGuider, IdGuiderConfig, _norm

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class UNetConfig:
    down_channels: Tuple[int, ...] = (32, 64)
    attn_heads: int = 2
    temporal_window: int = 0        # 0 = every frame attends to every frame
    latent_channels: int = 4
    audio_dim: int = 64
    layers_per_block: int = 1
    time_embed_dim: int = 128
    spatial_attention: Optional[Tuple[bool, ...]] = None   # per level; None = all levels
    use_temporal: bool = True

    def __post_init__(self):
        self.down_channels = tuple(int(c) for c in self.down_channels)
        if self.spatial_attention is not None:
            self.spatial_attention = tuple(bool(s) for s in self.spatial_attention)

    def validate(self):
        if len(self.down_channels) == 0:
            raise ConfigMismatch("down_channels must be nonempty")
        if any(b < a for a, b in zip(self.down_channels, self.down_channels[1:])):
            raise ConfigMismatch(f"down_channels must be nondecreasing, got {self.down_channels}")
        if any(c % self.attn_heads for c in self.down_channels):
            raise ConfigMismatch(f"every channel count must be divisible by attn_heads={self.attn_heads}")
        if self.spatial_attention is not None and len(self.spatial_attention) != len(self.down_channels):
            raise ConfigMismatch("spatial_attention needs one flag per down block")
        return self

    def attention_at(self, level: int) -> bool:
        return True if self.spatial_attention is None else self.spatial_attention[level]

    def guider_config(self, image_channels: int = 3, latent_scale: int = 1, **kwargs) -> IdGuiderConfig:
        return IdGuiderConfig(image_channels=image_channels, down_channels=self.down_channels,
                              layers_per_block=self.layers_per_block, latent_scale=latent_scale,
                              latent_channels=self.latent_channels, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down_channels"] = list(self.down_channels)
        if self.spatial_attention is not None:
            d["spatial_attention"] = list(self.spatial_attention)
        return d


def timestep_embedding(c_noise: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of the (continuous) noise conditioning value, ``[B] -> [B, dim]``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=c_noise.device) / half)
    args = c_noise.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


############## Blocks ##############

class ResnetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialSelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        q = self.norm(tokens)
        out, _ = self.attn(q, q, q, need_weights=False)
        return x + out.transpose(1, 2).reshape(n, c, h, w)


class AudioCrossAttention(nn.Module):
    """Spatial latent tokens query the frame's ``2k+1`` audio window tokens."""

    def __init__(self, ch: int, audio_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, kdim=audio_dim, vdim=audio_dim, batch_first=True)

    def forward(self, x, audio, return_attention: bool = False):
        n, c, h, w = x.shape
        tokens = self.norm(x.flatten(2).transpose(1, 2))
        out, weights = self.attn(tokens, audio, audio, need_weights=return_attention, average_attn_weights=True)
        return x + out.transpose(1, 2).reshape(n, c, h, w), weights


class TemporalAttention(nn.Module):
    """Per-location attention across the frames of a clip."""

    def __init__(self, ch: int, heads: int, window: int = 0):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.window = window

    def forward(self, x, num_frames: int):
        bf, c, h, w = x.shape
        b = bf // num_frames
        tokens = x.reshape(b, num_frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, num_frames, c)
        pos = timestep_embedding(torch.arange(num_frames, device=x.device), c).to(tokens.dtype)
        q = self.norm(tokens) + pos[None]
        mask = None
        if self.window > 0:
            idx = torch.arange(num_frames, device=x.device)
            mask = (idx[None, :] - idx[:, None]).abs() > self.window
        out, _ = self.attn(q, q, self.norm(tokens), attn_mask=mask, need_weights=False)
        out = out.reshape(b, h * w, num_frames, c).permute(0, 2, 3, 1).reshape(bf, c, h, w)
        return x + out


class UNetLayer(nn.Module):
    """ResNet -> (ID residual) -> Self-Attn -> Audio Cross-Attn -> Temporal-Attn."""

    def __init__(self, in_ch, out_ch, config: UNetConfig, self_attn: bool, audio_attn: bool):
        super().__init__()
        self.resnet = ResnetBlock(in_ch, out_ch, config.time_embed_dim)
        self.self_attn = SpatialSelfAttention(out_ch, config.attn_heads) if self_attn else None
        self.audio_attn = AudioCrossAttention(out_ch, config.audio_dim, config.attn_heads) if audio_attn else None
        self.temporal_attn = TemporalAttention(out_ch, config.attn_heads, config.temporal_window) \
            if config.use_temporal else None

    def forward(self, x, temb, audio, num_frames, id_residual=None, attn_maps=None):
        x = self.resnet(x, temb)
        if id_residual is not None:
            x = x + id_residual
        if self.self_attn is not None:
            x = self.self_attn(x)
        if self.audio_attn is not None:
            x, weights = self.audio_attn(x, audio, return_attention=attn_maps is not None)
            if attn_maps is not None:
                attn_maps.append(weights)
        if self.temporal_attn is not None:
            x = self.temporal_attn(x, num_frames)
        return x


@dataclass
class UNetOutput:
    sample: torch.Tensor
    audio_attentions: Optional[List[torch.Tensor]] = None


class DenoisingUNet(nn.Module):
    """
    F_theta. Input is the channel concat of noisy latents and masked-video
    latents (``2 * latent_channels``); output has the noisy latents' shape.
    Frames are folded into the batch for the 2D parts.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config.validate()
        chs = config.down_channels
        self.conv_in = nn.Conv2d(2 * config.latent_channels, chs[0], 3, padding=1)
        self.time_embed = nn.Sequential(
            nn.Linear(config.time_embed_dim, config.time_embed_dim), nn.SiLU(),
            nn.Linear(config.time_embed_dim, config.time_embed_dim))

        self.down_layers = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down_layers.append(nn.ModuleList(
                [UNetLayer(prev if j == 0 else ch, ch, config, config.attention_at(i), True)
                 for j in range(config.layers_per_block)]))
            last = i == len(chs) - 1
            self.downsamplers.append(None if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid_in = ResnetBlock(prev, prev, config.time_embed_dim)
        self.mid_attn = SpatialSelfAttention(prev, config.attn_heads)
        self.mid_temporal = TemporalAttention(prev, config.attn_heads, config.temporal_window) \
            if config.use_temporal else None
        self.mid_out = ResnetBlock(prev, prev, config.time_embed_dim)

        self.up_layers = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chs))):
            self.up_layers.append(nn.ModuleList(
                [UNetLayer(prev + ch if j == 0 else ch, ch, config, config.attention_at(i), True)
                 for j in range(config.layers_per_block)]))
            self.upsamplers.append(None if i == 0 else nn.Conv2d(ch, chs[i - 1], 3, padding=1))
            prev = chs[i - 1] if i > 0 else ch

        self.norm_out = _norm(prev)
        self.conv_out = nn.Conv2d(prev, config.latent_channels, 3, padding=1)

    def make_guider(self, image_channels: int = 3, latent_scale: int = 1, **kwargs) -> IdGuider:
        return IdGuider(self.config.guider_config(image_channels, latent_scale, **kwargs))

    def forward(self, noisy: torch.Tensor, cond: ConditionBundle, c_noise, return_attention: bool = False):
        b, f, c, h, w = noisy.shape
        if c != self.config.latent_channels:
            raise ShapeMismatch(f"expected {self.config.latent_channels} latent channels, got {c}")
        if cond.masked_latents.shape != noisy.shape:
            raise ShapeMismatch(f"masked latents {tuple(cond.masked_latents.shape)} vs noisy {tuple(noisy.shape)}")
        if cond.audio.shape[-1] != self.config.audio_dim:
            raise ShapeMismatch(f"audio dim {cond.audio.shape[-1]} vs configured {self.config.audio_dim}")
        id_levels = cond.id_features.levels
        if [l.shape[1] for l in id_levels] != list(self.config.down_channels):
            raise ConfigMismatch(f"ID pyramid channels {[l.shape[1] for l in id_levels]} "
                                 f"do not match down_channels {list(self.config.down_channels)}")

        if not isinstance(c_noise, torch.Tensor):
            c_noise = torch.tensor([c_noise], dtype=torch.float32)
        c_noise = c_noise.reshape(-1).to(noisy.device)
        if c_noise.shape[0] == 1 and b > 1:
            c_noise = c_noise.expand(b)
        temb = self.time_embed(timestep_embedding(c_noise, self.config.time_embed_dim))
        temb = temb.repeat_interleave(f, dim=0)
        audio = cond.audio.reshape(b * f, *cond.audio.shape[2:]).to(noisy.dtype)

        x = torch.cat([noisy, cond.masked_latents.to(noisy.dtype)], dim=2).reshape(b * f, 2 * c, h, w)
        x = self.conv_in(x)
        attn_maps = [] if return_attention else None

        skips = []
        for i, (layers, down) in enumerate(zip(self.down_layers, self.downsamplers)):
            id_res = id_levels[i].repeat_interleave(f, dim=0).to(x.dtype)
            if id_res.shape[-2:] != x.shape[-2:]:
                raise ShapeMismatch(f"ID level {i} is {tuple(id_res.shape[-2:])}, UNet is at {tuple(x.shape[-2:])}")
            for layer in layers:
                x = layer(x, temb, audio, f, id_residual=id_res, attn_maps=attn_maps)
            skips.append(x)
            if down is not None:
                x = down(x)

        x = self.mid_in(x, temb)
        x = self.mid_attn(x)
        if self.mid_temporal is not None:
            x = self.mid_temporal(x, f)
        x = self.mid_out(x, temb)

        for layers, up in zip(self.up_layers, self.upsamplers):
            skip = skips.pop()
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = torch.cat([x, skip], dim=1)
            for layer in layers:
                x = layer(x, temb, audio, f, attn_maps=attn_maps)
            if up is not None:
                x = up(F.interpolate(x, scale_factor=2.0, mode="nearest"))

        out = self.conv_out(F.silu(self.norm_out(x))).reshape(b, f, c, h, w)
        if return_attention:
            return UNetOutput(out, attn_maps)
        return out

    def save_pretrained(self, fpath: str):
        os.makedirs(fpath, exist_ok=True)
        torch.save(self.state_dict(), path.join(fpath, "model.pt"))
        with open(path.join(fpath, "config.json"), "w") as f:
            json.dump({"format_version": CHECKPOINT_FORMAT_VERSION, "unet": self.config.to_dict()}, f, indent=2)

    @classmethod
    def from_pretrained(cls, fpath: str) -> "DenoisingUNet":
        with open(path.join(fpath, "config.json"), "r") as f:
            meta = json.load(f)
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigMismatch(f"unsupported checkpoint format {meta.get('format_version')}")
        model = cls(UNetConfig(**meta["unet"]))
        model.load_state_dict(torch.load(path.join(fpath, "model.pt"), map_location="cpu"))
        return model


############## FUNCTIONS #################

def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


class ModelFactory:
    @staticmethod
    def build(config: UNetConfig,
              image_channels: int = 3,
              latent_scale: int = 1,
              guider_input: str = "pixel") -> Tuple[DenoisingUNet, IdGuider]:
        unet = DenoisingUNet(config)
        guider = unet.make_guider(image_channels, latent_scale, input_space=guider_input)
        logger.info("built UNet with %d parameters, ID-Guider with %d parameters",
                    count_parameters(unet), count_parameters(guider))
        return unet, guider


if __name__ == "__main__":
    from lsdiff.conditions import IdFeaturePyramid

    config = UNetConfig(down_channels=(8, 16), latent_channels=4, audio_dim=8)
    unet, guider = ModelFactory.build(config)
    x = torch.randn(1, 4, 4, 16, 16)
    ids = guider(torch.rand(1, 3, 16, 16), torch.zeros(1, 1, 16, 16))
    cond = ConditionBundle(ids, torch.randn(1, 4, 5, 8), torch.randn(1, 4, 4, 16, 16))
    print(unet(x, cond, 0.1).shape)
