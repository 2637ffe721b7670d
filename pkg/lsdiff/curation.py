"""
Dataset curation: face detection, resolution gate, quality filter, jitter
segmentation, length filter and audio-visual alignment filter, in that order.

Each source produces one or more manifest records (one per jitter segment once
the source reaches segmentation). A record's ``verdicts`` map holds
``pass``/``fail``/``skip`` for every filter; filters after a failure are
``skip``. The manifest is JSON lines, appended one source at a time, so an
interrupted run resumes by skipping sources already present.
"""
import os
import json
import math
import logging
from os import path
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import ndimage
from tqdm import tqdm

from lsdiff.errors import LipSyncError, MaskError
from lsdiff.environment import CurateConfig
from lsdiff.media import (BoundingBox, LandmarkSequence, VideoClip, CONTAINER_EXTS, SIDECAR_NAME,
                          load_video, save_video, save_landmarks)
from lsdiff.masking import fill_missing, lip_landmarks_from_face

logger = logging.getLogger(__name__)

FILTERS = ("detect", "resolution", "quality", "jitter", "length", "alignment")
PASS, FAIL, SKIP = "pass", "fail", "skip"


############## Adapters ##############

class DetectorAdapter:
    """``frame [C, H, W] -> list of face boxes``; deterministic for a fixed frame."""

    def __call__(self, frame: torch.Tensor) -> List[BoundingBox]:
        raise NotImplementedError("DetectorAdapter is abstract")


class StubDetector(DetectorAdapter):
    """
    Bright-region detector for synthetic footage: connected regions brighter
    than the midpoint of the frame's luminance range. A frame whose range is
    below ``min_contrast`` has no face.
    """

    def __init__(self, min_contrast: float = 0.05):
        self.min_contrast = min_contrast

    def __call__(self, frame):
        lum = frame.float().mean(dim=0).cpu().numpy()
        lo, hi = float(lum.min()), float(lum.max())
        if hi - lo < self.min_contrast:
            return []
        labeled, _ = ndimage.label(lum > (lo + hi) / 2)
        return [BoundingBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
                for sl in ndimage.find_objects(labeled) if sl is not None]


class QualityAdapter:
    """``clip -> score``; higher is better, range ``[0, inf)``."""

    def __call__(self, clip: VideoClip) -> float:
        raise NotImplementedError("QualityAdapter is abstract")


class SharpnessQuality(QualityAdapter):
    """Mean variance of the Laplacian of each frame's luminance."""

    def __init__(self, stride: int = 1):
        self.stride = stride

    def __call__(self, clip):
        scores = [ndimage.laplace(f.mean(dim=0).cpu().numpy().astype(np.float64)).var()
                  for f in clip.frames[::self.stride]]
        return float(np.mean(scores))


class AlignmentAdapter:
    """``(clip, face boxes) -> score in [-1, 1]`` or None when the clip has no audio."""

    def __call__(self, clip: VideoClip, boxes: Sequence[BoundingBox]) -> Optional[float]:
        raise NotImplementedError("AlignmentAdapter is abstract")


class EnergyAlignment(AlignmentAdapter):
    """
    Pearson correlation between per-frame audio RMS and the darkness of the
    mouth region (lower middle of the face box), an openness proxy.
    """

    def __call__(self, clip, boxes):
        if clip.audio is None:
            return None
        samples, rate = clip.audio.samples, clip.audio.sample_rate
        energy, openness = [], []
        for f, box in enumerate(boxes):
            a = int(round(f / clip.fps * rate))
            b = int(round((f + 1) / clip.fps * rate))
            chunk = samples[a:b]
            energy.append(float(np.sqrt(np.mean(chunk ** 2))) if len(chunk) else 0.0)
            x0, y0, x1, y1 = BoundingBox(box.x0 + 0.25 * box.width, box.y0 + 0.6 * box.height,
                                         box.x0 + 0.75 * box.width, box.y0 + 0.9 * box.height
                                         ).clamp(clip.width, clip.height).to_pixels()
            region = clip.frames[f, :, y0:y1, x0:x1]
            openness.append(1.0 - float(region.mean()) if region.numel() else 0.0)
        energy, openness = np.asarray(energy), np.asarray(openness)
        if len(energy) < 2 or energy.std() == 0 or openness.std() == 0:
            return 0.0
        return float(np.corrcoef(energy, openness)[0, 1])


def build_adapters(config: CurateConfig):
    detector = StubDetector()
    quality = SharpnessQuality()
    alignment = EnergyAlignment() if config.alignment == "energy" else None
    return detector, quality, alignment


############## Filters ##############

def select_largest(boxes: Sequence[BoundingBox]) -> Optional[BoundingBox]:
    """Max area; ties go to the box that comes first in top-left order."""
    if not boxes:
        return None
    return min(boxes, key=lambda b: (-b.area, b.y0, b.x0))


def detect_faces(clip: VideoClip, detector: DetectorAdapter) -> List[Optional[BoundingBox]]:
    return [select_largest(detector(frame)) for frame in clip.frames]


def resolution_gate(face_sizes: Sequence[Optional[Tuple[float, float]]], min_side: float = 228) -> bool:
    """Pass iff some frame's face is larger than ``min_side`` on both sides."""
    present = [s for s in face_sizes if s is not None]
    if not present:
        raise MaskError("no frame has a detected face", code="NO_FACE")
    return any(w > min_side and h > min_side for w, h in present)


def recorded_face_size(boxes: Sequence[Optional[BoundingBox]], min_side: float = 228) -> Tuple[float, float]:
    """
    Size stored in the manifest: the largest face that clears the resolution gate,
    or the largest face overall when none does.
    """
    present = [b for b in boxes if b is not None]
    clearing = [b for b in present if b.width > min_side and b.height > min_side]
    largest = select_largest(clearing or present)
    return (largest.width, largest.height)


def jitter_segment(boxes: Sequence[BoundingBox], displacement_threshold: float) -> List[Tuple[int, int]]:
    """Cut between frames whose box centres move more than the threshold; maximal uncut ranges."""
    if len(boxes) == 0:
        return []
    ranges, start = [], 0
    for f in range(1, len(boxes)):
        (ax, ay), (bx, by) = boxes[f - 1].center, boxes[f].center
        if math.hypot(bx - ax, by - ay) > displacement_threshold:
            ranges.append((start, f))
            start = f
    ranges.append((start, len(boxes)))
    return ranges


def length_gate(frame_range: Tuple[int, int], fps: float, min_seconds: float = 2.0) -> bool:
    assert fps > 0, "fps must be positive"
    return (frame_range[1] - frame_range[0]) / fps >= min_seconds


def displacement_threshold(config: CurateConfig, width: int, height: int) -> float:
    if config.displacement_threshold is not None:
        return config.displacement_threshold
    return config.jitter_ratio * math.hypot(width, height)


############## Manifest ##############

@dataclass
class CurationRecord:
    source: str
    time_range: Optional[Tuple[float, float]] = None
    frame_range: Optional[Tuple[int, int]] = None
    max_face_size: Optional[Tuple[float, float]] = None
    quality_score: Optional[float] = None
    alignment_score: Optional[float] = None
    verdicts: Dict[str, str] = field(default_factory=lambda: {k: SKIP for k in FILTERS})
    reasons: Dict[str, str] = field(default_factory=dict)
    output_path: Optional[str] = None
    frames_dir: Optional[str] = None
    audio_path: Optional[str] = None
    landmarks_path: Optional[str] = None
    error: Optional[Dict[str, str]] = None

    @property
    def filters_passed(self) -> bool:
        return self.error is None and all(v != FAIL for v in self.verdicts.values()) \
            and self.verdicts.get("detect") == PASS and self.output_path is not None

    def fail(self, name: str, reason: str) -> "CurationRecord":
        self.verdicts[name] = FAIL
        self.reasons[name] = reason
        return self

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["filters_passed"] = self.filters_passed
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "CurationRecord":
        d = {k: v for k, v in d.items() if k != "filters_passed"}
        for k in ("time_range", "frame_range", "max_face_size"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class CurationManifest:
    records: List[CurationRecord] = field(default_factory=list)

    @property
    def survivors(self) -> List[CurationRecord]:
        return [r for r in self.records if r.filters_passed]

    @property
    def sources(self) -> List[str]:
        return sorted({r.source for r in self.records})

    def failures(self) -> Dict[str, int]:
        counts = {}
        for r in self.records:
            for name, v in r.verdicts.items():
                if v == FAIL:
                    counts[name] = counts.get(name, 0) + 1
        return counts

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"source": r.source, "frame_range": r.frame_range, "quality_score": r.quality_score,
                   "alignment_score": r.alignment_score, "filters_passed": r.filters_passed}
            row.update({f"verdict_{k}": v for k, v in r.verdicts.items()})
            rows.append(row)
        return pd.DataFrame(rows)


def read_manifest(fpath: str) -> CurationManifest:
    records = []
    if path.isfile(fpath):
        with open(fpath, "r") as f:
            for line in f:
                if line.strip():
                    records.append(CurationRecord.from_dict(json.loads(line)))
    return CurationManifest(records)


def append_records(fpath: str, records: Sequence[CurationRecord]):
    os.makedirs(path.dirname(path.abspath(fpath)), exist_ok=True)
    with open(fpath, "a") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def list_sources(in_dir: str) -> List[str]:
    """PNG-directory clips and container files directly under ``in_dir``, sorted."""
    out = []
    for name in sorted(os.listdir(in_dir)):
        p = path.join(in_dir, name)
        if path.isdir(p) and path.isfile(path.join(p, SIDECAR_NAME)):
            out.append(p)
        elif path.isfile(p) and name.lower().endswith(CONTAINER_EXTS):
            out.append(p)
    return out


############## Pipeline ##############

def _log(record: CurationRecord, name: str):
    rng = record.frame_range if record.frame_range is not None else "all"
    logger.info("%s %s: %s=%s %s", record.source, rng, name, record.verdicts[name],
                record.reasons.get(name, ""))


def _write_clip(clip: VideoClip, boxes: Sequence[BoundingBox], out_dir: str, name: str, base: str) -> Dict[str, str]:
    clip_dir = path.join(out_dir, name)
    save_video(clip, clip_dir)
    points = tuple(np.clip(lip_landmarks_from_face(b), 0, [clip.width, clip.height]) for b in boxes)
    lm_path = save_landmarks(LandmarkSequence(points, clip.width, clip.height), path.join(clip_dir, "landmarks.json"))
    rel = lambda p: path.relpath(p, base)
    return {"output_path": rel(clip_dir), "frames_dir": rel(clip_dir),
            "audio_path": rel(path.join(clip_dir, "audio.wav")) if clip.audio is not None else None,
            "landmarks_path": rel(lm_path)}


def process_source(source: str,
                   out_dir: str,
                   config: CurateConfig,
                   detector: DetectorAdapter,
                   quality: QualityAdapter,
                   alignment: Optional[AlignmentAdapter],
                   base_dir: Optional[str] = None) -> List[CurationRecord]:
    base_dir = base_dir or out_dir
    clip = load_video(source)
    whole = CurationRecord(source, (0.0, clip.duration), (0, clip.num_frames))

    boxes = detect_faces(clip, detector)
    try:
        filled = fill_missing(boxes, config.max_gap)
    except MaskError as e:
        whole.fail("detect", e.code)
        _log(whole, "detect")
        return [whole]
    whole.verdicts["detect"] = PASS
    _log(whole, "detect")

    whole.max_face_size = recorded_face_size(boxes, config.min_face_side)
    if not resolution_gate([(b.width, b.height) if b is not None else None for b in boxes], config.min_face_side):
        whole.fail("resolution", "LOW_RESOLUTION")
        _log(whole, "resolution")
        return [whole]
    whole.verdicts["resolution"] = PASS

    whole.quality_score = quality(clip)
    if whole.quality_score < config.quality_threshold:
        whole.fail("quality", "LOW_QUALITY")
        _log(whole, "quality")
        return [whole]
    whole.verdicts["quality"] = PASS

    threshold = displacement_threshold(config, clip.width, clip.height)
    ranges = jitter_segment(filled, threshold)
    logger.info("%s: %d jitter segment(s) at threshold %.1f px", source, len(ranges), threshold)

    # runs of single-frame segments are unstable footage
    groups, i = [], 0
    while i < len(ranges):
        j = i
        if ranges[i][1] - ranges[i][0] < 2:
            while j + 1 < len(ranges) and ranges[j + 1][1] - ranges[j + 1][0] < 2:
                j += 1
            groups.append(((ranges[i][0], ranges[j][1]), False))
        else:
            groups.append((ranges[i], True))
        i = j + 1

    records = []
    stem = path.splitext(path.basename(path.normpath(source)))[0]
    for (a, b), stable in groups:
        rec = CurationRecord(source, (a / clip.fps, b / clip.fps), (a, b), whole.max_face_size,
                             whole.quality_score, verdicts=dict(whole.verdicts))
        records.append(rec)
        if not stable:
            rec.fail("jitter", "JITTER")
            _log(rec, "jitter")
            continue
        rec.verdicts["jitter"] = PASS
        if not length_gate((a, b), clip.fps, config.min_seconds):
            rec.fail("length", "TOO_SHORT")
            _log(rec, "length")
            continue
        rec.verdicts["length"] = PASS
        sub = clip.slice(a, b)
        if alignment is not None:
            rec.alignment_score = alignment(sub, filled[a:b])
            if rec.alignment_score is None:
                rec.fail("alignment", "NO_AUDIO")
            elif rec.alignment_score < config.alignment_threshold:
                rec.fail("alignment", "MISALIGNED")
            else:
                rec.verdicts["alignment"] = PASS
            _log(rec, "alignment")
            if rec.verdicts["alignment"] == FAIL:
                continue
        paths = _write_clip(sub, filled[a:b], out_dir, f"{stem}_{a:05d}_{b:05d}", base_dir)
        for k, v in paths.items():
            setattr(rec, k, v)
        logger.info("%s [%d, %d): kept -> %s", source, a, b, rec.output_path)
    return records


def run_pipeline(sources: Sequence[str],
                 out_dir: str,
                 manifest_path: str,
                 config: CurateConfig = CurateConfig(),
                 detector: Optional[DetectorAdapter] = None,
                 quality: Optional[QualityAdapter] = None,
                 alignment: Optional[AlignmentAdapter] = None) -> CurationManifest:
    """
    Curate ``sources`` into ``out_dir`` and append their records to
    ``manifest_path``. Sources already in the manifest are skipped; a source
    that cannot be processed is recorded with its error and the run continues.
    """
    d, q, a = build_adapters(config)
    detector, quality = detector or d, quality or q
    alignment = alignment if alignment is not None else a
    os.makedirs(out_dir, exist_ok=True)
    base_dir = path.dirname(path.abspath(manifest_path))

    manifest = read_manifest(manifest_path)
    done = set(manifest.sources)
    for source in tqdm(list(sources), desc="Curating"):
        if source in done:
            logger.info("%s already curated, skipping", source)
            continue
        try:
            records = process_source(source, out_dir, config, detector, quality, alignment, base_dir)
        except LipSyncError as e:
            logger.warning("%s: %s", source, e)
            records = [CurationRecord(source, error={"code": e.code, "message": e.message})]
        append_records(manifest_path, records)
        manifest.records.extend(records)
        done.add(source)
    logger.info("curated %d source(s): %d record(s), %d kept", len(done), len(manifest.records),
                len(manifest.survivors))
    return manifest


def validate_manifest(manifest: CurationManifest, config: CurateConfig = CurateConfig()) -> List[str]:
    """Re-check every kept record against the thresholds; returns the violations found."""
    problems = []
    for r in manifest.survivors:
        tag = f"{r.source} {r.frame_range}"
        for name in FILTERS:
            if r.verdicts.get(name) not in (PASS, SKIP) or (name != "alignment" and r.verdicts.get(name) != PASS):
                problems.append(f"{tag}: verdict {name}={r.verdicts.get(name)}")
        w, h = r.max_face_size if r.max_face_size is not None else (0, 0)
        if not (w > config.min_face_side and h > config.min_face_side):
            problems.append(f"{tag}: face {w}x{h} does not exceed {config.min_face_side}")
        if r.quality_score is None or r.quality_score < config.quality_threshold:
            problems.append(f"{tag}: quality {r.quality_score} below {config.quality_threshold}")
        a, b = r.frame_range
        fps = (b - a) / (r.time_range[1] - r.time_range[0]) if r.time_range[1] > r.time_range[0] else 0
        if fps <= 0 or not length_gate((a, b), fps, config.min_seconds - 1e-9):
            problems.append(f"{tag}: shorter than {config.min_seconds}s")
        if r.verdicts.get("alignment") == PASS and (r.alignment_score is None
                                                    or r.alignment_score < config.alignment_threshold):
            problems.append(f"{tag}: alignment {r.alignment_score} below {config.alignment_threshold}")
    return problems
