"""
Inference: match the video to the audio length, track and crop the face,
denoise the crop in overlapping segments with classifier-free guidance, then
paste the generated face back into the source frames.
"""
import math
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torchvision.transforms import functional as TF

from lsdiff.errors import InferenceError, ShapeMismatch
from lsdiff.environment import InferenceConfig, RunConfig
from lsdiff.media import (AudioTrack, BoundingBox, LandmarkSequence, LatentVolume, VideoClip,
                          load_audio, load_video, save_video)
from lsdiff.masking import (MaskSequence, build_mask_sequence, fill_missing, fixed_mask_sequence,
                            lip_landmarks_from_face, smooth_boxes)
from lsdiff.codec import LatentCodec, latent_to_pixel
from lsdiff.conditions import (ConditionBundle, IdGuider, MelStubExtractor, SpeechFeatureExtractor,
                               clip_audio_windows, encode_identity, encode_masked_video)
from lsdiff.diffusion import NoiseSchedule, initial_noise, sample
from lsdiff.unet import DenoisingUNet
from lsdiff.curation import DetectorAdapter, StubDetector, detect_faces, select_largest

logger = logging.getLogger(__name__)

Segment = Tuple[int, int]


############## Duration matching ##############

def palindrome_indices(num_frames: int, length: int) -> np.ndarray:
    """Source index for each output frame of v, reverse(v), v, ... cut to ``length``."""
    p = np.arange(length) % (2 * num_frames)
    return np.where(p < num_frames, p, 2 * num_frames - 1 - p)


def match_duration(video: VideoClip, audio: AudioTrack, junction_smooth_frames: int = 3) -> VideoClip:
    """
    Cut or extend ``video`` to ``round(audio duration * fps)`` frames and attach
    ``audio``. Extension plays the video forwards and backwards alternately;
    frames within ``junction_smooth_frames`` of each turn are replaced by a
    centred moving average of that radius.
    """
    if video.num_frames == 0 or audio.duration <= 0:
        raise InferenceError("video and audio must both be nonempty", code="EMPTY_VIDEO")
    n = int(math.floor(audio.duration * video.fps + 0.5))
    F = video.num_frames
    frames = video.frames[torch.from_numpy(palindrome_indices(F, n))]
    h = junction_smooth_frames
    if n > F and h > 0:
        raw = frames.clone()
        for J in range(F, n, F):
            for t in range(max(0, J - h), min(n, J + h)):
                frames[t] = raw[max(0, t - h):min(n, t + h + 1)].mean(dim=0)
    logger.info("duration match: %d source frames -> %d frames", F, n)
    return VideoClip(frames, video.fps, audio)


############## Segments ##############

def plan_segments(num_frames: int, segment_len: int = 16, overlap: int = 4) -> List[Segment]:
    """Windows of ``segment_len`` at stride ``segment_len - overlap``; the last one ends at ``num_frames``."""
    if not 0 < overlap < segment_len:
        raise InferenceError(f"need 0 < overlap < segment_len, got {overlap}, {segment_len}", code="CONFIG_MISMATCH")
    if num_frames < segment_len:
        raise InferenceError(f"{num_frames} frames is shorter than one {segment_len}-frame segment")
    stride = segment_len - overlap
    starts = list(range(0, num_frames - segment_len + 1, stride))
    if starts[-1] + segment_len < num_frames:
        starts.append(num_frames - segment_len)
    return [(s, s + segment_len) for s in starts]


def segment_weights(plan: Sequence[Segment], num_frames: int, overlap: int = 4) -> torch.Tensor:
    """
    ``[len(plan), num_frames]`` blend weights. Each segment ramps linearly over
    ``overlap`` frames at both ends; weights are normalised so they sum to 1 on
    every frame.
    """
    raw = torch.zeros(len(plan), num_frames, dtype=torch.float64)
    for i, (s, e) in enumerate(plan):
        j = torch.arange(e - s, dtype=torch.float64)
        ramp = torch.minimum((j + 1) / (overlap + 1), (e - s - j) / (overlap + 1))
        raw[i, s:e] = ramp.clamp(max=1.0)
    total = raw.sum(dim=0)
    if (total <= 0).any():
        raise InferenceError("segment plan leaves frames uncovered", code="CONFIG_MISMATCH")
    return raw / total


def run_segments(noise: torch.Tensor,
                 cond: ConditionBundle,
                 net,
                 plan: Sequence[Segment],
                 schedule: NoiseSchedule = NoiseSchedule(),
                 scale: float = 3.0,
                 sigma_data: float = 0.5,
                 overlap: int = 4) -> torch.Tensor:
    """
    Sample every segment on its slice of the full-length ``noise`` ``[B, F, C, H, W]``
    and blend the overlaps in latent space.
    """
    num_frames = noise.shape[1]
    if cond.num_frames != num_frames:
        raise ShapeMismatch(f"conditions cover {cond.num_frames} frames, noise {num_frames}")
    weights = segment_weights(plan, num_frames, overlap).to(noise.dtype).to(noise.device)
    out = torch.zeros_like(noise)
    for i, (s, e) in enumerate(plan):
        logger.debug("segment %d/%d: frames [%d, %d)", i + 1, len(plan), s, e)
        z = sample(noise[:, s:e], cond.slice_frames(s, e), net, schedule, scale, sigma_data)
        out[:, s:e] += weights[i, s:e].view(1, -1, 1, 1, 1) * z
    return out


############## Face tracking and compositing ##############

def square_box(box: BoundingBox) -> BoundingBox:
    cx, cy = box.center
    half = max(box.width, box.height) / 2
    return BoundingBox(cx - half, cy - half, cx + half, cy + half)


def track_faces(clip: VideoClip,
                detector: DetectorAdapter,
                expand_ratio: float = 0.4,
                alpha: float = 0.75,
                max_gap: int = 8) -> Tuple[List[BoundingBox], List[BoundingBox]]:
    """Per-frame face boxes (gaps filled) and the smoothed square crop boxes around them."""
    faces = fill_missing(detect_faces(clip, detector), max_gap)
    crops = [square_box(f.expand(expand_ratio)).clamp(clip.width, clip.height) for f in faces]
    return faces, smooth_boxes(crops, alpha)


def crop_faces(clip: VideoClip, crop_boxes: Sequence[BoundingBox], size: int) -> VideoClip:
    frames = []
    for frame, box in zip(clip.frames, crop_boxes):
        x0, y0, x1, y1 = box.clamp(clip.width, clip.height).to_pixels()
        frames.append(TF.resize(frame[:, y0:y1, x0:x1], [size, size], antialias=True))
    return VideoClip(torch.stack(frames), clip.fps, clip.audio)


def to_crop_coords(box: BoundingBox, crop: BoundingBox, size: int) -> BoundingBox:
    x0, y0, x1, y1 = crop.to_pixels()
    sx, sy = size / max(x1 - x0, 1), size / max(y1 - y0, 1)
    return BoundingBox((box.x0 - x0) * sx, (box.y0 - y0) * sy, (box.x1 - x0) * sx, (box.y1 - y0) * sy)


def from_crop_coords(box: BoundingBox, crop: BoundingBox, size: int) -> BoundingBox:
    x0, y0, x1, y1 = crop.to_pixels()
    sx, sy = (x1 - x0) / size, (y1 - y0) / size
    return BoundingBox(x0 + box.x0 * sx, y0 + box.y0 * sy, x0 + box.x1 * sx, y0 + box.y1 * sy)


def composite(source: VideoClip,
              generated_face: VideoClip,
              src_boxes: Sequence[BoundingBox],
              gen_boxes: Sequence[BoundingBox],
              dilation_px: int = 4,
              crop_boxes: Optional[Sequence[BoundingBox]] = None) -> VideoClip:
    """
    Paste ``generated_face`` (resized to each crop box, which default to
    ``src_boxes``) into ``source``, but only inside the bounding rectangle of
    the dilated source and generated face boxes. Pixels outside that
    rectangle are the source's, bit for bit.
    """
    crop_boxes = src_boxes if crop_boxes is None else crop_boxes
    F = source.num_frames
    if not (generated_face.num_frames == len(src_boxes) == len(gen_boxes) == len(crop_boxes) == F):
        raise ShapeMismatch(f"composite needs {F} generated frames and boxes, got {generated_face.num_frames}, "
                            f"{len(src_boxes)}, {len(gen_boxes)}, {len(crop_boxes)}")
    if generated_face.channels != source.channels:
        raise ShapeMismatch(f"generated face has {generated_face.channels} channels, source {source.channels}")

    out = source.frames.clone()
    for f in range(F):
        x0, y0, x1, y1 = crop_boxes[f].clamp(source.width, source.height).to_pixels()
        if x1 <= x0 or y1 <= y0:
            continue
        patch = generated_face.frames[f]
        if tuple(patch.shape[-2:]) != (y1 - y0, x1 - x0):
            patch = TF.resize(patch, [y1 - y0, x1 - x0], antialias=True)
        canvas = source.frames[f].clone()
        canvas[:, y0:y1, x0:x1] = patch.to(canvas.dtype)
        region = src_boxes[f].dilate(dilation_px).union(gen_boxes[f].dilate(dilation_px))
        rx0, ry0, rx1, ry1 = region.clamp(source.width, source.height).to_pixels()
        out[f, :, ry0:ry1, rx0:rx1] = canvas[:, ry0:ry1, rx0:rx1]
    return VideoClip(out, source.fps, source.audio)


############## Pipeline ##############

class InferencePipeline:
    """Turns a source video plus a driving audio track into a lip-synced video."""

    def __init__(self,
                 unet: DenoisingUNet,
                 guider: IdGuider,
                 codec: LatentCodec,
                 run_config: RunConfig,
                 infer_config: Optional[InferenceConfig] = None,
                 detector: Optional[DetectorAdapter] = None,
                 extractor: Optional[SpeechFeatureExtractor] = None,
                 device="cpu"):
        self.device = torch.device(device)
        self.unet = unet.to(self.device).eval()
        self.guider = guider.to(self.device).eval()
        self.codec = codec.to(self.device).eval()
        self.run_config = run_config
        self.config = infer_config if infer_config is not None else run_config.infer
        self.config.validate()
        self.detector = detector if detector is not None else StubDetector()
        tc = run_config.train
        self.extractor = extractor if extractor is not None else \
            MelStubExtractor(unet.config.audio_dim, tc.sample_rate, seed=run_config.seed)

    @classmethod
    def from_checkpoint(cls, fpath: str, infer_config: Optional[InferenceConfig] = None, **kwargs):
        from lsdiff.runner import load_models
        unet, guider, codec, run_config = load_models(fpath)
        return cls(unet, guider, codec, run_config, infer_config, **kwargs)

    @property
    def schedule(self) -> NoiseSchedule:
        c = self.config
        return NoiseSchedule(c.sigma_min, c.sigma_max, c.rho, c.steps)

    def conditions(self, crop: VideoClip, landmarks: LandmarkSequence, ref_index: int) -> ConditionBundle:
        tc = self.run_config.train
        size = crop.height
        if tc.mask_mode == "fixed":
            masks = fixed_mask_sequence(crop.num_frames, size, size)
        else:
            masks = build_mask_sequence(landmarks, size, size, tc.pad_ratio, tc.smooth_alpha, tc.max_gap)
        windows = clip_audio_windows(crop, self.extractor, tc.audio_k)
        frames = VideoClip(crop.frames.to(self.device), crop.fps)
        masks = MaskSequence(masks.boxes, masks.binary_masks.to(self.device))
        masked = encode_masked_video(frames, masks, self.codec).data[None]
        ids = encode_identity(frames.frames[ref_index], masks.binary_masks[ref_index], self.guider, self.codec)
        return ConditionBundle(ids, windows.per_frame[None], masked).to(self.device)

    @torch.no_grad()
    def __call__(self, video: VideoClip, audio: AudioTrack, seed: int = 0) -> VideoClip:
        c, tc = self.config, self.run_config.train
        size = tc.resolution
        clip = match_duration(video, audio, c.junction_smooth_frames)
        faces, crops = track_faces(clip, self.detector, c.bbox_expand_ratio, c.bbox_smooth_alpha, tc.max_gap)
        crop = crop_faces(clip, crops, size)
        landmarks = LandmarkSequence(
            tuple(np.clip(lip_landmarks_from_face(to_crop_coords(f, b, size)), 0, size) for f, b in zip(faces, crops)),
            size, size)

        ref_index = 0 if c.reference == "first" else int(np.random.default_rng(seed).integers(crop.num_frames))
        cond = self.conditions(crop, landmarks, ref_index)
        plan = plan_segments(crop.num_frames, c.segment_len, c.overlap)
        logger.info("%d frames in %d segment(s), reference frame %d, guidance %.2f",
                    crop.num_frames, len(plan), ref_index, c.guidance_scale)

        generator = torch.Generator().manual_seed(seed)
        noise = initial_noise(cond.masked_latents.shape, generator).to(self.device)
        latents = run_segments(noise, cond, self.unet, plan, self.schedule, c.guidance_scale,
                               tc.sigma_data, c.overlap)
        face = latent_to_pixel(LatentVolume(latents[0], self.codec.scale), self.codec, clip.fps)
        face = VideoClip(face.frames.cpu(), face.fps)

        gen_boxes = []
        for f, (frame, crop_box) in enumerate(zip(face.frames, crops)):
            found = select_largest(self.detector(frame))
            gen_boxes.append(from_crop_coords(found, crop_box, size) if found is not None else faces[f])
        out = composite(clip, face, faces, gen_boxes, c.dilation_px, crops)
        return out.with_audio(audio)

    def run(self, video_path: str, out_path: str, audio_path: Optional[str] = None, seed: int = 0) -> str:
        video = load_video(video_path)
        audio = load_audio(audio_path) if audio_path is not None else video.audio
        if audio is None:
            raise InferenceError(f"no audio given and {video_path} has none", code="NO_AUDIO")
        out = self(video, audio, seed)
        save_video(out, out_path)
        logger.info("wrote %s (%d frames)", out_path, out.num_frames)
        return out_path
