import json
import logging
from os import path
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset
from tqdm import tqdm

from lsdiff.errors import TrainingError, MaskError, MediaError
from lsdiff.media import AudioTrack, VideoClip, LandmarkSequence, load_video, load_audio, load_landmarks
from lsdiff.masking import MaskSequence, build_mask_sequence, fixed_mask_sequence, apply_mask
from lsdiff.conditions import AudioFeatureWindowed, SpeechFeatureExtractor, clip_audio_windows

logger = logging.getLogger(__name__)


@dataclass
class TrainSample:
    sample_id: str
    target_clip: VideoClip
    masked_clip: VideoClip
    masks: MaskSequence
    ref_image: torch.Tensor       # [C, H, W], from anywhere in the source video
    ref_lip_mask: torch.Tensor    # [1, H, W]
    audio_window: AudioFeatureWindowed
    start: int
    ref_index: int


@dataclass
class TrainBatch:
    target: torch.Tensor          # [B, F, C, H, W]
    masked: torch.Tensor          # [B, F, C, H, W]
    masks: torch.Tensor           # [B, F, 1, H, W]
    ref_image: torch.Tensor       # [B, C, H, W]
    ref_lip_mask: torch.Tensor    # [B, 1, H, W]
    audio: torch.Tensor           # [B, F, 2k+1, D_a]
    sample_ids: List[str]

    def __len__(self):
        return self.target.shape[0]


def sample_indices(num_frames: int, frames_per_clip: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Window start uniform over valid starts, reference index uniform over the whole video."""
    if num_frames < frames_per_clip:
        raise TrainingError(f"video has {num_frames} frames, need {frames_per_clip}", code="CLIP_TOO_SHORT")
    start = int(rng.integers(0, num_frames - frames_per_clip + 1))
    ref_index = int(rng.integers(0, num_frames))
    return start, ref_index


def build_sample(video: VideoClip,
                 landmarks: LandmarkSequence,
                 rng: np.random.Generator,
                 extractor: SpeechFeatureExtractor,
                 frames_per_clip: int = 16,
                 k: int = 2,
                 pad_ratio: float = 0.25,
                 alpha: float = 0.75,
                 max_gap: int = 8,
                 mask_mode: str = "adaptive",
                 sample_id: str = "") -> TrainSample:
    """
    Cut a contiguous training window, mask it, window its audio and pick a
    reference frame from the full video. Raises CLIP_TOO_SHORT, GAP_TOO_LONG,
    or DEGENERATE_MASK when a window frame's mask covers none or all of it.
    """
    start, ref_index = sample_indices(video.num_frames, frames_per_clip, rng)
    if len(landmarks) != video.num_frames:
        raise TrainingError(f"{len(landmarks)} landmark frames for a {video.num_frames}-frame video",
                            code="SHAPE_MISMATCH")
    if mask_mode == "fixed":
        full_masks = fixed_mask_sequence(video.num_frames, video.height, video.width)
    else:
        full_masks = build_mask_sequence(landmarks, video.height, video.width, pad_ratio, alpha, max_gap)

    end = start + frames_per_clip
    masks = full_masks.slice(start, end)
    coverage = masks.coverage()
    if (coverage <= 0).any() or (coverage >= 1).any():
        raise TrainingError(f"{sample_id}: degenerate mask in window [{start}, {end})", code="DEGENERATE_MASK",
                            sample_ids=[sample_id])

    target = video.slice(start, end)
    windows = clip_audio_windows(video, extractor, k)
    return TrainSample(
        sample_id=sample_id,
        target_clip=target,
        masked_clip=apply_mask(target, masks),
        masks=masks,
        ref_image=video.frames[ref_index],
        ref_lip_mask=full_masks.binary_masks[ref_index],
        audio_window=AudioFeatureWindowed(windows.per_frame[start:end], k),
        start=start,
        ref_index=ref_index,
    )


def collate(samples: Sequence[TrainSample]) -> TrainBatch:
    return TrainBatch(
        target=torch.stack([s.target_clip.frames for s in samples]),
        masked=torch.stack([s.masked_clip.frames for s in samples]),
        masks=torch.stack([s.masks.binary_masks for s in samples]),
        ref_image=torch.stack([s.ref_image for s in samples]),
        ref_lip_mask=torch.stack([s.ref_lip_mask for s in samples]),
        audio=torch.stack([s.audio_window.per_frame for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )


############## Synthetic corpus ##############

def _paint(frame: np.ndarray, x0, y0, x1, y1, value):
    h, w = frame.shape[-2:]
    ys = slice(min(max(int(round(y0)), 0), h), min(max(int(round(y1)), 0), h))
    xs = slice(min(max(int(round(x0)), 0), w), min(max(int(round(x1)), 0), w))
    frame[:, ys, xs] = value


def make_synthetic_clip(num_frames: int = 24,
                        size: int = 64,
                        fps: float = 25.0,
                        sample_rate: int = 16000,
                        channels: int = 3,
                        seed: int = 0,
                        face_frac: float = 0.5,
                        period_frames: float = 8.0,
                        audio_phase: float = 0.0,
                        jitter_px: int = 0,
                        blank_frames: Sequence[int] = (),
                        background: float = 0.1,
                        face_level: float = 0.7) -> Tuple[VideoClip, LandmarkSequence]:
    """
    A bright face rectangle on a dark background with a dark mouth whose opening
    follows the loudness envelope of a synthetic tone. ``audio_phase`` shifts
    the audio envelope against the mouth (pi gives anti-phase). ``jitter_px``
    moves the face left and right by that many pixels on alternating frames.
    """
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(num_frames)
    envelope = 0.5 + 0.5 * np.sin(2 * np.pi * t / period_frames + phase)

    fw, fh = face_frac * size, face_frac * size
    frames = np.full((num_frames, channels, size, size), background, dtype=np.float32)
    points = []
    blank = set(blank_frames)
    for f in range(num_frames):
        if f in blank:
            points.append(None)
            continue
        shift = (jitter_px if f % 2 else -jitter_px)
        x0 = (size - fw) / 2 + shift
        y0 = (size - fh) / 2
        _paint(frames[f], x0, y0, x0 + fw, y0 + fh, face_level)
        cx, cy = x0 + fw / 2, y0 + 0.72 * fh
        half_w = 0.2 * fw
        half_h = max(1.0, 0.5 * (0.04 + 0.12 * envelope[f]) * fh)
        _paint(frames[f], cx - half_w, cy - half_h, cx + half_w, cy + half_h, 0.05)
        pts = np.array([[cx - half_w, cy], [cx + half_w, cy], [cx, cy - half_h], [cx, cy + half_h]])
        points.append(np.clip(pts, 0, size))

    n = int(round(num_frames / fps * sample_rate))
    ts = np.arange(n) / sample_rate
    env_audio = 0.5 + 0.5 * np.sin(2 * np.pi * ts * fps / period_frames + phase + audio_phase)
    samples = (0.5 * env_audio * np.sin(2 * np.pi * 220.0 * ts)).astype(np.float32)

    clip = VideoClip(torch.from_numpy(frames), fps, AudioTrack(samples, sample_rate))
    return clip, LandmarkSequence(tuple(points), size, size)


############## Datasets ##############

class DatasetBase(Dataset):
    """
    Holds ``(id, clip, landmarks)`` items for both splits. A sample is rebuilt
    on every access from a generator seeded by ``(seed, epoch, index)``, so
    workers stay deterministic without sharing state.
    """

    def __init__(self,
                 extractor: SpeechFeatureExtractor,
                 split: str = "train",
                 frames_per_clip: int = 16,
                 k: int = 2,
                 pad_ratio: float = 0.25,
                 alpha: float = 0.75,
                 max_gap: int = 8,
                 mask_mode: str = "adaptive",
                 seed: int = 0):
        super().__init__()
        self.extractor = extractor
        self.split = split
        self.frames_per_clip = frames_per_clip
        self.k = k
        self.pad_ratio = pad_ratio
        self.alpha = alpha
        self.max_gap = max_gap
        self.mask_mode = mask_mode
        self.seed = seed
        self.epoch = 0
        self.train_data: Optional[List[Tuple[str, VideoClip, LandmarkSequence]]] = []
        self.val_data: Optional[List[Tuple[str, VideoClip, LandmarkSequence]]] = []

    @property
    def data(self):
        return self.train_data if self.split == "train" else self.val_data

    def set_split(self, split: str) -> Dataset:
        assert split == "train" or split == "val" or split == "dev", \
            "split can either be train, or val / dev"
        self.split = split
        return self

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def commit(self) -> Dataset:
        """
        commits the split, i.e. throws away the other split to save
        memory
        """
        if self.split == "train":
            self.val_data = None
        else:
            self.train_data = None
        return self

    def frames(self) -> torch.Tensor:
        """Every frame of the current split as one ``[N, C, H, W]`` tensor."""
        return torch.cat([clip.frames for _, clip, _ in self.data])

    def has_val(self):
        return self.val_data is not None and len(self.val_data) > 0

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, key) -> TrainSample:
        """``key`` is an index, or a ``(step, index)`` pair from a step-keyed sampler."""
        epoch, index = key if isinstance(key, tuple) else (self.epoch, key)
        items = self.data
        for attempt in range(len(items)):
            i = (index + attempt) % len(items)
            sample_id, clip, landmarks = items[i]
            rng = np.random.default_rng([self.seed, epoch, index, attempt])
            try:
                return build_sample(clip, landmarks, rng, self.extractor, self.frames_per_clip, self.k,
                                    self.pad_ratio, self.alpha, self.max_gap, self.mask_mode, sample_id)
            except (TrainingError, MaskError) as e:
                logger.warning("skipping %s: %s", sample_id, e)
        raise TrainingError(f"no usable clip in the {self.split} split", code="CLIP_TOO_SHORT")


class SyntheticLipDataset(DatasetBase):
    def __init__(self,
                 extractor: SpeechFeatureExtractor,
                 num_clips: int = 4,
                 num_frames: int = 24,
                 size: int = 64,
                 fps: float = 25.0,
                 channels: int = 3,
                 val_clips: int = 0,
                 **kwargs):
        super().__init__(extractor, **kwargs)
        for i in range(num_clips + val_clips):
            clip, lms = make_synthetic_clip(num_frames, size, fps, extractor.sample_rate, channels,
                                            seed=self.seed * 1000 + i)
            (self.train_data if i < num_clips else self.val_data).append((f"synthetic_{i:03d}", clip, lms))


class LipSyncDataset(DatasetBase):
    """
    Curated clips listed in a JSON-lines manifest, one record per clip with
    ``frames_dir``, ``audio_path``, ``landmarks_path`` and ``filters_passed``.
    The last ``val_clips`` usable records form the validation split.
    """

    def __init__(self,
                 extractor: SpeechFeatureExtractor,
                 manifest: str,
                 val_clips: int = 0,
                 resolution: Optional[int] = None,
                 **kwargs):
        super().__init__(extractor, **kwargs)
        records = read_training_manifest(manifest)
        base = path.dirname(path.abspath(manifest))
        items = []
        for rec in tqdm(records, desc="Loading clips"):
            frames_dir = _resolve(base, rec["frames_dir"])
            try:
                clip = load_video(frames_dir)
                if rec.get("audio_path") and clip.audio is None:
                    clip = clip.with_audio(load_audio(_resolve(base, rec["audio_path"])))
                landmarks = load_landmarks(_resolve(base, rec["landmarks_path"]), clip.width, clip.height)
            except (MediaError, OSError, KeyError) as e:
                logger.warning("dropping manifest record %s: %s", frames_dir, e)
                continue
            if resolution is not None and (clip.height != resolution or clip.width != resolution):
                clip, landmarks = resize_clip(clip, landmarks, resolution)
            items.append((path.basename(path.normpath(frames_dir)), clip, landmarks))
        cut = len(items) - val_clips if val_clips > 0 else len(items)
        self.train_data, self.val_data = items[:cut], items[cut:]
        logger.info("loaded %d training and %d validation clips from %s",
                    len(self.train_data), len(self.val_data), manifest)


def _resolve(base: str, p: str) -> str:
    return p if path.isabs(p) else path.join(base, p)


def read_training_manifest(fpath: str) -> List[Dict]:
    records = []
    with open(fpath, "r") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("filters_passed", False):
                records.append(rec)
    return records


def resize_clip(clip: VideoClip, landmarks: LandmarkSequence, size: int) -> Tuple[VideoClip, LandmarkSequence]:
    sy, sx = size / clip.height, size / clip.width
    frames = F.interpolate(clip.frames, size=(size, size), mode="bilinear", align_corners=False).clamp(0, 1)
    pts = tuple(None if p is None else np.clip(p * np.array([sx, sy]), 0, size) for p in landmarks.points)
    return VideoClip(frames, clip.fps, clip.audio), LandmarkSequence(pts, size, size)
