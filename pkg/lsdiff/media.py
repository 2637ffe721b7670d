"""
Canonical data model and media I/O.

Frames are float tensors ``[F, C, H, W]`` in ``[0, 1]``; audio is a mono float32
numpy vector. The exchange format for clips is a directory of numbered PNG
frames plus a ``clip.json`` sidecar ``{"fps": ..., "audio_path": ...}``;
container files (mp4, avi, ...) are decoded with imageio.
"""
import os
import json
import math
import logging
import tempfile
import subprocess
from os import path
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import imageio
import imageio_ffmpeg
import soundfile as sf
from PIL import Image
from scipy.signal import resample_poly

from lsdiff.errors import MediaError

logger = logging.getLogger(__name__)

SIDECAR_NAME = "clip.json"
CONTAINER_EXTS = (".mp4", ".avi", ".mov", ".mkv", ".webm", ".gif")


def check_finite(t: Union[torch.Tensor, np.ndarray], what: str = "tensor"):
    ok = torch.isfinite(t).all().item() if isinstance(t, torch.Tensor) else np.isfinite(t).all()
    if not ok:
        raise MediaError(f"{what} contains NaN or Inf values", code="NONFINITE_INPUT")


@dataclass(frozen=True)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise MediaError(f"sample rate must be positive, got {self.sample_rate}", code="INVALID_RATE")
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        check_finite(samples, "audio samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def slice_seconds(self, start: float, end: float) -> "AudioTrack":
        a = int(round(start * self.sample_rate))
        b = int(round(end * self.sample_rate))
        return AudioTrack(self.samples[a:b], self.sample_rate)


@dataclass(frozen=True)
class VideoClip:
    frames: torch.Tensor
    fps: float
    audio: Optional[AudioTrack] = None

    def __post_init__(self):
        frames = self.frames
        if frames.dim() != 4:
            raise MediaError(f"frames must be [F, C, H, W], got shape {tuple(frames.shape)}", code="SHAPE_MISMATCH")
        if frames.shape[0] < 1:
            raise MediaError("clip has zero frames", code="EMPTY_VIDEO")
        if frames.shape[1] not in (1, 3):
            raise MediaError(f"channel count must be 1 or 3, got {frames.shape[1]}", code="SHAPE_MISMATCH")
        if self.fps <= 0:
            raise MediaError(f"fps must be positive, got {self.fps}", code="INVALID_RATE")
        check_finite(frames, "frames")
        if not frames.is_floating_point():
            object.__setattr__(self, "frames", frames.float())
        if self.audio is not None:
            drift = abs(self.audio.duration - self.num_frames / self.fps)
            if drift > 1.0 / self.fps + 1e-9:
                raise MediaError(f"audio ({self.audio.duration:.3f}s) and video "
                                 f"({self.num_frames / self.fps:.3f}s) are not aligned",
                                 code="AUDIO_MISALIGNED")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def with_frames(self, frames: torch.Tensor) -> "VideoClip":
        return VideoClip(frames, self.fps, self.audio if frames.shape[0] == self.num_frames else None)

    def with_audio(self, audio: Optional[AudioTrack]) -> "VideoClip":
        return VideoClip(self.frames, self.fps, audio)

    def slice(self, start: int, end: int) -> "VideoClip":
        """Frames ``[start, end)``; aligned audio is cut to the same time range."""
        frames = self.frames[start:end]
        audio = None
        if self.audio is not None:
            audio = self.audio.slice_seconds(start / self.fps, end / self.fps)
        return VideoClip(frames, self.fps, audio)


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise MediaError(f"non-finite box {self.as_tuple()}", code="NONFINITE_INPUT")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise MediaError(f"inverted box {self.as_tuple()}", code="SHAPE_MISMATCH")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        return cls(*[float(v) for v in arr])

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    @property
    def is_degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def clamp(self, width: float, height: float) -> "BoundingBox":
        x0 = min(max(self.x0, 0.0), width)
        x1 = min(max(self.x1, 0.0), width)
        y0 = min(max(self.y0, 0.0), height)
        y1 = min(max(self.y1, 0.0), height)
        return BoundingBox(x0, y0, x1, y1)

    def expand(self, ratio: float) -> "BoundingBox":
        """Grow each side by ``ratio`` of the box width (x) or height (y)."""
        dx, dy = ratio * self.width, ratio * self.height
        return BoundingBox(self.x0 - dx, self.y0 - dy, self.x1 + dx, self.y1 + dy)

    def dilate(self, px: float) -> "BoundingBox":
        return BoundingBox(self.x0 - px, self.y0 - px, self.x1 + px, self.y1 + px)

    def union(self, other: "BoundingBox") -> "BoundingBox":
        # bounding rectangle of the two boxes
        return BoundingBox(min(self.x0, other.x0), min(self.y0, other.y0),
                           max(self.x1, other.x1), max(self.y1, other.y1))

    def to_pixels(self) -> Tuple[int, int, int, int]:
        """Round half up onto the pixel grid."""
        return tuple(int(math.floor(v + 0.5)) for v in self.as_tuple())


@dataclass(frozen=True)
class LandmarkSequence:
    """Per-frame ``(K, 2)`` arrays of (x, y) pixel coordinates, ``None`` = MISSING."""
    points: Tuple[Optional[np.ndarray], ...]
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        pts = []
        for f, p in enumerate(self.points):
            if p is None:
                pts.append(None)
                continue
            p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
            check_finite(p, f"landmarks of frame {f}")
            if self.width is not None and self.height is not None:
                inside = (p[:, 0] >= 0) & (p[:, 0] <= self.width) & (p[:, 1] >= 0) & (p[:, 1] <= self.height)
                if not inside.all():
                    raise MediaError(f"landmarks of frame {f} leave the {self.width}x{self.height} frame",
                                     code="SHAPE_MISMATCH")
            pts.append(p)
        object.__setattr__(self, "points", tuple(pts))

    def __len__(self):
        return len(self.points)

    def __getitem__(self, idx):
        return self.points[idx]

    def slice(self, start: int, end: int) -> "LandmarkSequence":
        return LandmarkSequence(self.points[start:end], self.width, self.height)


@dataclass(frozen=True)
class LatentVolume:
    data: torch.Tensor
    scale: int = 1

    def __post_init__(self):
        if self.data.dim() != 4:
            raise MediaError(f"latents must be [F, C, H, W], got {tuple(self.data.shape)}", code="SHAPE_MISMATCH")
        check_finite(self.data, "latents")

    @property
    def shape(self):
        return self.data.shape


############## I/O ##############

def _frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    arr = np.asarray(frame)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 4:
        arr = arr[:, :, :3]
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return torch.from_numpy(arr.astype(np.float32) / scale).permute(2, 0, 1)


def _tensor_to_uint8(frame: torch.Tensor) -> np.ndarray:
    arr = (frame.clamp(0, 1) * 255.0 + 0.5).to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def _extract_audio(fpath: str) -> Optional[AudioTrack]:
    """Decode the first audio stream of a container to mono PCM; None when it has no audio."""
    with tempfile.TemporaryDirectory() as tmp:
        wav = path.join(tmp, "audio.wav")
        cmd = [imageio_ffmpeg.get_ffmpeg_exe(), "-y", "-i", fpath, "-vn", "-acodec", "pcm_s16le", "-ac", "1", wav]
        proc = subprocess.run(cmd, capture_output=True)
        if proc.returncode != 0 or not path.isfile(wav):
            logger.debug("no audio stream in %s", fpath)
            return None
        return load_audio(wav)


def _fit_length(track: AudioTrack, seconds: float) -> AudioTrack:
    """Cut or zero-pad to exactly ``seconds``; codec priming and padding shift container audio lengths."""
    n = int(round(seconds * track.sample_rate))
    samples = track.samples[:n]
    if len(samples) < n:
        samples = np.concatenate([samples, np.zeros(n - len(samples), dtype=samples.dtype)])
    return AudioTrack(samples, track.sample_rate)


def load_video(fpath: str) -> VideoClip:
    """
    Load a PNG-directory clip (with its sidecar) or any container imageio decodes.
    Raises UNREADABLE_MEDIA on decode failure and EMPTY_VIDEO for zero frames.
    """
    if not path.exists(fpath):
        raise MediaError(f"{fpath} does not exist")
    audio = None
    try:
        if path.isdir(fpath):
            with open(path.join(fpath, SIDECAR_NAME), "r") as f:
                meta = json.load(f)
            fps = float(meta["fps"])
            names = sorted(n for n in os.listdir(fpath) if n.lower().endswith(".png"))
            frames = [_frame_to_tensor(np.array(Image.open(path.join(fpath, n)))) for n in names]
            if meta.get("audio_path"):
                audio = load_audio(path.join(fpath, meta["audio_path"]))
        else:
            reader = imageio.get_reader(fpath)
            fps = float(reader.get_meta_data().get("fps", 25.0))
            frames = [_frame_to_tensor(fr) for fr in reader]
            reader.close()
            audio = _extract_audio(fpath)
    except MediaError:
        raise
    except Exception as e:
        raise MediaError(f"could not decode {fpath}: {e}") from e
    if len(frames) == 0:
        raise MediaError(f"{fpath} has zero frames", code="EMPTY_VIDEO")
    clip = VideoClip(torch.stack(frames), fps)
    if audio is not None:
        if not path.isdir(fpath):
            audio = _fit_length(audio, clip.num_frames / fps)
        clip = clip.with_audio(audio)
    logger.debug("loaded %s: %d frames at %.2f fps", fpath, clip.num_frames, fps)
    return clip


def save_video(clip: VideoClip, fpath: str) -> str:
    """
    Save as a container when ``fpath`` has a video extension, with the audio
    track muxed in as AAC, otherwise as a PNG directory with a ``clip.json``
    sidecar (and ``audio.wav`` if audio is present).
    """
    if fpath.lower().endswith(CONTAINER_EXTS):
        os.makedirs(path.dirname(path.abspath(fpath)), exist_ok=True)
        with tempfile.TemporaryDirectory() as tmp:
            kwargs = {}
            if clip.audio is not None and not fpath.lower().endswith(".gif"):
                kwargs = {"audio_path": save_audio(clip.audio, path.join(tmp, "audio.wav")), "audio_codec": "aac"}
            elif clip.audio is not None:
                logger.warning("%s cannot carry audio; the track is dropped", fpath)
            writer = imageio.get_writer(fpath, fps=clip.fps, **kwargs)
            for frame in clip.frames:
                arr = _tensor_to_uint8(frame)
                writer.append_data(arr if arr.ndim == 3 else np.stack([arr] * 3, axis=-1))
            writer.close()
        return fpath

    os.makedirs(fpath, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        Image.fromarray(_tensor_to_uint8(frame)).save(path.join(fpath, f"{i:05d}.png"))
    meta = {"fps": clip.fps, "audio_path": None}
    if clip.audio is not None:
        save_audio(clip.audio, path.join(fpath, "audio.wav"))
        meta["audio_path"] = "audio.wav"
    with open(path.join(fpath, SIDECAR_NAME), "w") as f:
        json.dump(meta, f)
    return fpath


def load_audio(fpath: str) -> AudioTrack:
    try:
        samples, rate = sf.read(fpath, dtype="float32", always_2d=True)
    except Exception as e:
        raise MediaError(f"could not read audio {fpath}: {e}") from e
    # downmix to mono
    return AudioTrack(samples.mean(axis=1), int(rate))


def save_audio(track: AudioTrack, fpath: str) -> str:
    os.makedirs(path.dirname(path.abspath(fpath)), exist_ok=True)
    sf.write(fpath, np.clip(track.samples, -1.0, 1.0), track.sample_rate, subtype="PCM_16")
    return fpath


def resample_audio(track: AudioTrack, target_rate: int) -> AudioTrack:
    """Polyphase resampling; the output length is ``ceil(n * target / source)``."""
    if target_rate <= 0:
        raise MediaError(f"target rate must be positive, got {target_rate}", code="INVALID_RATE")
    target_rate = int(target_rate)
    if target_rate == track.sample_rate:
        return track
    g = math.gcd(target_rate, track.sample_rate)
    up, down = target_rate // g, track.sample_rate // g
    out = resample_poly(track.samples.astype(np.float64), up, down)
    return AudioTrack(out.astype(np.float32), target_rate)


def load_landmarks(fpath: str, width: Optional[int] = None, height: Optional[int] = None) -> LandmarkSequence:
    """JSON array, one entry per frame: a list of [x, y] pairs, or null."""
    with open(fpath, "r") as f:
        raw = json.load(f)
    return LandmarkSequence(tuple(None if p is None else np.asarray(p, dtype=np.float64) for p in raw),
                            width, height)


def save_landmarks(landmarks: LandmarkSequence, fpath: str) -> str:
    with open(fpath, "w") as f:
        json.dump([None if p is None else p.tolist() for p in landmarks.points], f)
    return fpath
