"""
Adaptive lip-region masking.

landmarks -> padded box per frame -> gap filling -> forward temporal smoothing of
the box corners -> rectangular binary masks -> masked video.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from lsdiff.errors import MaskError, ShapeMismatch
from lsdiff.media import BoundingBox, LandmarkSequence, VideoClip

logger = logging.getLogger(__name__)

MaybeBox = Optional[BoundingBox]


@dataclass(frozen=True)
class MaskSequence:
    boxes: Tuple[BoundingBox, ...]
    binary_masks: torch.Tensor   # [F, 1, H, W], 1 = editable

    @property
    def num_frames(self) -> int:
        return len(self.boxes)

    @property
    def degenerate(self) -> List[bool]:
        """Frames whose rasterized box is empty (flagged DEGENERATE in manifests)."""
        return [bool(m.sum() == 0) for m in self.binary_masks]

    def coverage(self) -> torch.Tensor:
        """Fraction of each frame covered by the mask, shape ``[F]``."""
        return self.binary_masks.flatten(1).mean(dim=1)

    def slice(self, start: int, end: int) -> "MaskSequence":
        return MaskSequence(self.boxes[start:end], self.binary_masks[start:end])

    @classmethod
    def from_landmarks(cls, landmarks: LandmarkSequence, height: int, width: int, **kwargs) -> "MaskSequence":
        return build_mask_sequence(landmarks, height, width, **kwargs)


def mask_coverage(masks: MaskSequence) -> torch.Tensor:
    return masks.coverage()


def landmarks_to_box(landmarks: LandmarkSequence, pad_ratio: float = 0.25) -> List[MaybeBox]:
    """Tight bound of each frame's lip points, padded by ``pad_ratio`` per side and clamped."""
    assert pad_ratio >= 0, "pad_ratio must be nonnegative"
    boxes = []
    for pts in landmarks.points:
        if pts is None or len(pts) == 0:
            boxes.append(None)
            continue
        box = BoundingBox(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()).expand(pad_ratio)
        if landmarks.width is not None and landmarks.height is not None:
            box = box.clamp(landmarks.width, landmarks.height)
        boxes.append(box)
    return boxes


def missing_runs(boxes: Sequence[MaybeBox]) -> List[Tuple[int, int]]:
    """Maximal ``[start, end)`` runs of MISSING entries."""
    runs, start = [], None
    for i, b in enumerate(boxes):
        if b is None and start is None:
            start = i
        elif b is not None and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(boxes)))
    return runs


def fill_missing(boxes: Sequence[MaybeBox], max_gap: int = 8) -> List[BoundingBox]:
    """
    Linear interpolation of corners across interior gaps, nearest-neighbour copy
    at the sequence ends. Detected entries are returned untouched.
    """
    known = [i for i, b in enumerate(boxes) if b is not None]
    if not known:
        raise MaskError("no frame has a detected face", code="NO_FACE")
    for a, b in missing_runs(boxes):
        if b - a > max_gap:
            raise MaskError(f"{b - a} consecutive frames without a face at [{a}, {b}), "
                            f"allowance is {max_gap}", code="GAP_TOO_LONG")

    out = list(boxes)
    for a, b in missing_runs(boxes):
        if a == 0:
            for i in range(a, b):
                out[i] = boxes[b]
        elif b == len(boxes):
            for i in range(a, b):
                out[i] = boxes[a - 1]
        else:
            left = np.array(boxes[a - 1].as_tuple())
            right = np.array(boxes[b].as_tuple())
            span = b - (a - 1)
            for i in range(a, b):
                w = (i - (a - 1)) / span
                out[i] = BoundingBox.from_array((1 - w) * left + w * right)
    return out


def smooth_boxes(boxes: Sequence[BoundingBox], alpha: float = 0.75) -> List[BoundingBox]:
    """``c'_t = alpha * c_t + (1 - alpha) * c_{t+1}`` on all four corners; last frame kept."""
    assert len(boxes) >= 1, "need at least one box"
    assert 0.0 <= alpha <= 1.0, "alpha must lie in [0, 1]"
    coords = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    smoothed = coords.copy()
    smoothed[:-1] = alpha * coords[:-1] + (1 - alpha) * coords[1:]
    return [BoundingBox.from_array(c) for c in smoothed]


def rasterize(boxes: Sequence[BoundingBox], height: int, width: int) -> torch.Tensor:
    masks = torch.zeros(len(boxes), 1, height, width)
    for f, box in enumerate(boxes):
        x0, y0, x1, y1 = box.clamp(width, height).to_pixels()
        if x1 > x0 and y1 > y0:
            masks[f, 0, y0:y1, x0:x1] = 1.0
        else:
            logger.warning("frame %d: degenerate mask box %s", f, box.as_tuple())
    return masks


def apply_mask(clip: VideoClip, masks: MaskSequence, fill: float = 0.0) -> VideoClip:
    m = masks.binary_masks
    if m.shape[0] != clip.num_frames or m.shape[-2:] != clip.frames.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(m.shape)} does not match clip {tuple(clip.frames.shape)}")
    frames = torch.where(m.bool().expand_as(clip.frames), torch.full_like(clip.frames, fill), clip.frames)
    return VideoClip(frames, clip.fps, clip.audio)


def build_mask_sequence(landmarks: LandmarkSequence,
                        height: int,
                        width: int,
                        pad_ratio: float = 0.25,
                        alpha: float = 0.75,
                        max_gap: int = 8) -> MaskSequence:
    boxes = fill_missing(landmarks_to_box(landmarks, pad_ratio), max_gap)
    boxes = smooth_boxes(boxes, alpha)
    return MaskSequence(tuple(boxes), rasterize(boxes, height, width))


def fixed_mask_sequence(num_frames: int,
                        height: int,
                        width: int,
                        region: Tuple[float, float, float, float] = (0.15, 0.45, 0.85, 1.0)) -> MaskSequence:
    """
    A large static lower-face box given as fractions of the frame, the
    non-adaptive baseline.
    """
    box = BoundingBox(region[0] * width, region[1] * height, region[2] * width, region[3] * height)
    boxes = tuple([box] * num_frames)
    return MaskSequence(boxes, rasterize(boxes, height, width))


def lip_landmarks_from_face(face: BoundingBox) -> np.ndarray:
    """
    Four mouth points (left, right, top, bottom corners) placed by face-box
    proportions, used when only a face detector is available.
    """
    cx = face.x0 + 0.5 * face.width
    return np.array([
        [face.x0 + 0.3 * face.width, face.y0 + 0.72 * face.height],
        [face.x0 + 0.7 * face.width, face.y0 + 0.72 * face.height],
        [cx, face.y0 + 0.64 * face.height],
        [cx, face.y0 + 0.82 * face.height],
    ])
