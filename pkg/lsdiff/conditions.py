"""
Condition streams fed to the denoiser: identity features from the reference
image, windowed audio features, and latents of the masked video.

All bundle tensors are batched:
    id_features   tuple of ``[B, C_l, H_l, W_l]`` (one level per UNet down block)
    audio         ``[B, F, 2k+1, D_a]``
    masked_latents ``[B, F, C_lat, H, W]``
"""
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchaudio

from lsdiff.errors import MediaError, ShapeMismatch
from lsdiff.media import AudioTrack, VideoClip, LatentVolume, resample_audio
from lsdiff.masking import MaskSequence, apply_mask
from lsdiff.codec import LatentCodec, pixel_to_latent

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IdFeaturePyramid:
    levels: Tuple[torch.Tensor, ...]

    def zeroed(self) -> "IdFeaturePyramid":
        return IdFeaturePyramid(tuple(torch.zeros_like(l) for l in self.levels))

    @property
    def channels(self) -> List[int]:
        return [l.shape[-3] for l in self.levels]


@dataclass(frozen=True)
class AudioFeatureWindowed:
    per_frame: torch.Tensor   # [F, 2k+1, D_a]
    k: int

    @property
    def num_frames(self) -> int:
        return self.per_frame.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.per_frame.shape[-1]


@dataclass(frozen=True)
class ConditionBundle:
    id_features: IdFeaturePyramid
    audio: torch.Tensor
    masked_latents: torch.Tensor
    audio_dropped: Optional[torch.Tensor] = None   # [B] bool
    ref_dropped: Optional[torch.Tensor] = None     # [B] bool

    def __post_init__(self):
        b, f = self.masked_latents.shape[:2]
        if self.audio.shape[:2] != (b, f):
            raise ShapeMismatch(f"audio {tuple(self.audio.shape)} vs masked latents {tuple(self.masked_latents.shape)}")
        for lvl in self.id_features.levels:
            if lvl.shape[0] != b:
                raise ShapeMismatch(f"id level batch {lvl.shape[0]} vs {b}")

    @property
    def batch_size(self) -> int:
        return self.masked_latents.shape[0]

    @property
    def num_frames(self) -> int:
        return self.masked_latents.shape[1]

    def unconditional(self) -> "ConditionBundle":
        """Audio and reference ZEROED, masked video kept (the CFG negative branch)."""
        ones = torch.ones(self.batch_size, dtype=torch.bool)
        return ConditionBundle(self.id_features.zeroed(), torch.zeros_like(self.audio),
                               self.masked_latents, ones, ones)

    zeroed_like = unconditional

    def slice_frames(self, start: int, end: int) -> "ConditionBundle":
        return replace(self, audio=self.audio[:, start:end], masked_latents=self.masked_latents[:, start:end])

    def to(self, device) -> "ConditionBundle":
        return ConditionBundle(IdFeaturePyramid(tuple(l.to(device) for l in self.id_features.levels)),
                               self.audio.to(device), self.masked_latents.to(device),
                               self.audio_dropped, self.ref_dropped)


############## Audio ##############

class SpeechFeatureExtractor:
    """
    Adapter contract: ``(samples, rate, fps) -> [T_a, D_a]`` with one row per
    video frame, ``T_a = round(duration * fps)``.
    """
    sample_rate: int = 16000
    feature_dim: int = 64

    def __call__(self, samples: np.ndarray, rate: int, fps: float) -> torch.Tensor:
        raise NotImplementedError("SpeechFeatureExtractor is abstract")


class MelStubExtractor(SpeechFeatureExtractor):
    """
    Deterministic stand-in for a pretrained speech encoder: log-mel energies of
    each video-frame-long audio window, projected by a fixed seeded random matrix.
    """

    def __init__(self, feature_dim: int = 64, sample_rate: int = 16000, n_mels: int = 40, seed: int = 0):
        self.feature_dim = feature_dim
        self.sample_rate = sample_rate
        self.n_mels = n_mels
        g = torch.Generator().manual_seed(seed)
        self.projection = torch.randn(n_mels, feature_dim, generator=g) / n_mels ** 0.5

    def __call__(self, samples, rate, fps):
        num_rows = int(round(len(samples) / rate * fps))
        hop = int(round(rate / fps))
        x = torch.as_tensor(np.asarray(samples, dtype=np.float32))
        total = num_rows * hop
        x = F.pad(x, (0, max(0, total - len(x))))[:total].reshape(num_rows, hop)
        power = torch.fft.rfft(x * torch.hann_window(hop, periodic=False), dim=-1).abs() ** 2
        fbank = torchaudio.functional.melscale_fbanks(
            n_freqs=power.shape[-1], f_min=0.0, f_max=rate / 2, n_mels=self.n_mels, sample_rate=rate)
        log_mel = torch.log(power @ fbank + 1e-6)
        return log_mel @ self.projection


class WhisperExtractor(SpeechFeatureExtractor):
    """
    Optional adapter around a pretrained Whisper encoder from transformers. The
    encoder runs at 50 feature frames per second; rows are resampled to the
    video frame rate.
    """

    def __init__(self, name_or_path: str = "openai/whisper-tiny", device: str = "cpu"):
        from transformers import WhisperFeatureExtractor, WhisperModel
        self.processor = WhisperFeatureExtractor.from_pretrained(name_or_path)
        self.encoder = WhisperModel.from_pretrained(name_or_path).get_encoder().to(device).eval()
        self.device = device
        self.sample_rate = self.processor.sampling_rate
        self.feature_dim = self.encoder.config.d_model

    @torch.no_grad()
    def __call__(self, samples, rate, fps):
        num_rows = int(round(len(samples) / rate * fps))
        chunk = 30 * rate
        feats = []
        for start in range(0, max(len(samples), 1), chunk):
            piece = samples[start:start + chunk]
            inputs = self.processor(piece, sampling_rate=rate, return_tensors="pt")
            hidden = self.encoder(inputs.input_features.to(self.device)).last_hidden_state[0]
            n_valid = int(np.ceil(len(piece) / rate * 50))
            feats.append(hidden[:n_valid].cpu())
        feats = torch.cat(feats, dim=0)
        return F.interpolate(feats.T[None], size=num_rows, mode="linear", align_corners=False)[0].T


def extract_audio_features(track: AudioTrack, fps: float, extractor: SpeechFeatureExtractor) -> torch.Tensor:
    if track.sample_rate != extractor.sample_rate:
        raise MediaError(f"extractor expects {extractor.sample_rate} Hz audio, got {track.sample_rate} Hz",
                         code="RATE_MISMATCH")
    feats = extractor(track.samples, track.sample_rate, fps)
    expected = int(round(track.duration * fps))
    assert feats.shape[0] == expected, f"extractor returned {feats.shape[0]} rows, expected {expected}"
    return feats


def clip_audio_windows(clip: VideoClip, extractor: SpeechFeatureExtractor, k: int = 2) -> AudioFeatureWindowed:
    """
    Windowed features with exactly one row per video frame. The track is
    resampled to the extractor rate; a missing track gives silence.
    """
    if clip.audio is None:
        n = int(round(clip.num_frames / clip.fps * extractor.sample_rate))
        track = AudioTrack(np.zeros(n, dtype=np.float32), extractor.sample_rate)
    else:
        track = resample_audio(clip.audio, extractor.sample_rate)
    feats = extract_audio_features(track, clip.fps, extractor).float()
    if feats.shape[0] < clip.num_frames:
        feats = F.pad(feats, (0, 0, 0, clip.num_frames - feats.shape[0]))
    return window_audio(feats[:clip.num_frames], k)


def window_audio(features: torch.Tensor, k: int = 2) -> AudioFeatureWindowed:
    """Row t holds ``x_{t-k} .. x_{t+k}``; out-of-range rows are exact zeros."""
    assert k >= 0, "window radius must be nonnegative"
    padded = F.pad(features, (0, 0, k, k))
    windows = padded.unfold(0, 2 * k + 1, 1).permute(0, 2, 1)
    return AudioFeatureWindowed(windows.contiguous(), k)


############## ID-Guider ##############

def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if ch % 8 == 0 else 1, ch)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock2D(nn.Module):
    """Plain 2D residual block, no timestep input."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            _norm(in_ch), nn.SiLU(), nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(out_ch), nn.SiLU(), nn.Conv2d(out_ch, out_ch, 3, padding=1),
        )
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.block(x)


@dataclass
class IdGuiderConfig:
    image_channels: int = 3
    downsampler_channels: Tuple[int, ...] = (32, 64, 128, 64)
    down_channels: Tuple[int, ...] = (32, 64)   # mirrors UNetConfig.down_channels
    layers_per_block: int = 1
    latent_scale: int = 1                       # codec scale the pyramid must match
    input_space: str = "pixel"                  # "pixel" or "latent"
    latent_channels: int = 4

    @classmethod
    def full_scale(cls) -> "IdGuiderConfig":
        return cls(down_channels=(320, 640, 1280, 1280), layers_per_block=2, latent_scale=8)


class IdGuider(nn.Module):
    """
    Reference image + lip-mask indicator channel -> conv downsampler
    -> 2D ResBlocks mirroring the UNet down path -> zero-initialised 1x1 outputs,
    one pyramid level per UNet down block.
    """

    def __init__(self, config: IdGuiderConfig):
        super().__init__()
        self.config = config
        in_ch = (config.latent_channels if config.input_space == "latent" else config.image_channels) + 1
        n_stride = 0 if config.input_space == "latent" else int(round(np.log2(config.latent_scale)))
        assert n_stride <= len(config.downsampler_channels), "downsampler too shallow for the codec scale"

        layers, prev = [], in_ch
        for i, ch in enumerate(config.downsampler_channels):
            stride = 2 if i < n_stride else 1
            layers += [nn.Conv2d(prev, ch, 3, stride=stride, padding=1), nn.SiLU()]
            prev = ch
        self.downsampler = nn.Sequential(*layers)

        self.blocks = nn.ModuleList()
        self.outputs = nn.ModuleList()
        self.resamplers = nn.ModuleList()
        for i, ch in enumerate(config.down_channels):
            res = [ResBlock2D(prev if j == 0 else ch, ch) for j in range(config.layers_per_block)]
            self.blocks.append(nn.Sequential(*res))
            self.outputs.append(zero_module(nn.Conv2d(ch, ch, 1)))
            last = i == len(config.down_channels) - 1
            self.resamplers.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

    def forward(self, ref: torch.Tensor, lip_mask: torch.Tensor) -> IdFeaturePyramid:
        if lip_mask.shape[-2:] != ref.shape[-2:]:
            raise ShapeMismatch(f"reference {tuple(ref.shape)} and lip mask {tuple(lip_mask.shape)} differ")
        h = self.downsampler(torch.cat([ref, lip_mask], dim=1))
        levels = []
        for block, out, resample in zip(self.blocks, self.outputs, self.resamplers):
            h = block(h)
            levels.append(out(h))
            h = resample(h)
        return IdFeaturePyramid(tuple(levels))


def encode_identity(ref_image: torch.Tensor,
                    lip_mask: torch.Tensor,
                    guider: IdGuider,
                    codec: Optional[LatentCodec] = None) -> IdFeaturePyramid:
    """
    ``ref_image`` ``[B, C, H, W]`` or ``[C, H, W]``, ``lip_mask`` ``[B, 1, H, W]`` or ``[1, H, W]``.
    With ``input_space='latent'`` the reference is first encoded by ``codec`` and
    the mask is resized to the latent grid.
    """
    if ref_image.dim() == 3:
        ref_image, lip_mask = ref_image[None], lip_mask[None]
    if ref_image.shape[-2:] != lip_mask.shape[-2:] or ref_image.shape[0] != lip_mask.shape[0]:
        raise ShapeMismatch(f"reference {tuple(ref_image.shape)} and lip mask {tuple(lip_mask.shape)} differ")
    if guider.config.input_space == "latent":
        assert codec is not None, "latent-space guider needs a codec"
        with torch.no_grad():
            ref_image = codec.encode(ref_image)
        lip_mask = F.interpolate(lip_mask, size=ref_image.shape[-2:], mode="nearest")
    return guider(ref_image, lip_mask)


def encode_masked_video(clip: VideoClip, masks: MaskSequence, codec: LatentCodec, fill: float = 0.0) -> LatentVolume:
    return pixel_to_latent(apply_mask(clip, masks, fill), codec)


############## Condition dropout ##############

def prob_mask_like(shape, prob: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if prob == 1:
        return torch.ones(shape, dtype=torch.bool)
    elif prob == 0:
        return torch.zeros(shape, dtype=torch.bool)
    return torch.rand(shape, generator=generator) < prob


def drop_conditions(bundle: ConditionBundle,
                    p_audio: float = 0.05,
                    p_ref: float = 0.15,
                    generator: Optional[torch.Generator] = None) -> ConditionBundle:
    """
    Independent per-sample draws for audio and reference; a dropped audio forces
    the reference to drop as well. Dropped streams become zeros of the same shape.
    ``masked_latents`` is passed through untouched.
    """
    assert 0 <= p_audio <= 1 and 0 <= p_ref <= 1, "probabilities must lie in [0, 1]"
    b = bundle.batch_size
    drop_audio = prob_mask_like((b,), p_audio, generator)
    drop_ref = prob_mask_like((b,), p_ref, generator) | drop_audio
    if not drop_audio.any() and not drop_ref.any():
        return replace(bundle, audio_dropped=drop_audio, ref_dropped=drop_ref)

    def _zero(x: torch.Tensor, drop: torch.Tensor) -> torch.Tensor:
        m = drop.to(x.device).reshape(-1, *([1] * (x.dim() - 1)))
        return torch.where(m, torch.zeros_like(x), x)

    levels = tuple(_zero(l, drop_ref) for l in bundle.id_features.levels)
    return ConditionBundle(IdFeaturePyramid(levels), _zero(bundle.audio, drop_audio),
                           bundle.masked_latents, drop_audio, drop_ref)
