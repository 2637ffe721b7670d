import numpy as np
import pytest
import torch

from lsdiff.errors import InferenceError, ShapeMismatch
from lsdiff.media import AudioTrack, BoundingBox, VideoClip
from lsdiff.conditions import ConditionBundle, IdFeaturePyramid
from lsdiff.diffusion import NoiseSchedule, initial_noise, sample
from lsdiff.curation import StubDetector
from lsdiff.data import make_synthetic_clip
from lsdiff.runner import CHECKPOINT_NAME, Runner
from lsdiff.inference import (InferencePipeline, composite, crop_faces, from_crop_coords, match_duration,
                              palindrome_indices, plan_segments, run_segments, segment_weights, square_box,
                              to_crop_coords, track_faces)


############## Segments ##############

def test_plan_segments_example():
    assert plan_segments(41, 16, 4) == [(0, 16), (12, 28), (24, 40), (25, 41)]
    assert plan_segments(16, 16, 4) == [(0, 16)]
    assert plan_segments(28, 16, 4) == [(0, 16), (12, 28)]


def test_plan_segments_errors():
    with pytest.raises(InferenceError) as e:
        plan_segments(10, 16, 4)
    assert e.value.code == "TOO_SHORT"
    with pytest.raises(InferenceError) as e:
        plan_segments(20, 16, 16)
    assert e.value.code == "CONFIG_MISMATCH"


@pytest.mark.parametrize("num_frames", range(8, 60))
def test_plan_covers_every_frame(num_frames):
    plan = plan_segments(num_frames, 8, 3)
    covered = np.zeros(num_frames, dtype=int)
    for s, e in plan:
        assert e - s == 8
        covered[s:e] += 1
    assert (covered >= 1).all()
    assert plan[0][0] == 0 and plan[-1][1] == num_frames
    w = segment_weights(plan, num_frames, 3)
    assert torch.allclose(w.sum(dim=0), torch.ones(num_frames, dtype=torch.float64))
    assert (w >= 0).all()


def _cond(num_frames, dtype=torch.float64):
    g = torch.Generator().manual_seed(7)
    ids = IdFeaturePyramid((torch.ones(1, 2, 2, 2, dtype=dtype),))
    return ConditionBundle(ids, torch.randn(1, num_frames, 3, 4, generator=g, dtype=dtype),
                           torch.randn(1, num_frames, 2, 2, 2, generator=g, dtype=dtype))


@pytest.mark.parametrize("num_frames", [16, 28, 40, 41])
def test_segmented_sampling_equals_full_length_for_frame_local_net(frame_local_net, num_frames):
    cond = _cond(num_frames)
    noise = initial_noise(cond.masked_latents.shape, torch.Generator().manual_seed(0), dtype=torch.float64)
    schedule = NoiseSchedule(num_steps=4)
    plan = plan_segments(num_frames, 16, 4)
    blended = run_segments(noise, cond, frame_local_net, plan, schedule, scale=3.0, overlap=4)
    full = sample(noise, cond, frame_local_net, schedule, scale=3.0)
    assert (blended - full).abs().max() < 1e-6


def test_single_segment_is_a_direct_sample(frame_local_net):
    cond = _cond(16)
    noise = initial_noise(cond.masked_latents.shape, torch.Generator().manual_seed(1), dtype=torch.float64)
    out = run_segments(noise, cond, frame_local_net, [(0, 16)], NoiseSchedule(num_steps=3), scale=2.0, overlap=4)
    assert torch.allclose(out, sample(noise, cond, frame_local_net, NoiseSchedule(num_steps=3), scale=2.0))


def test_run_segments_checks_condition_length(frame_local_net):
    cond = _cond(16)
    with pytest.raises(ShapeMismatch):
        run_segments(torch.zeros(1, 20, 2, 2, 2, dtype=torch.float64), cond, frame_local_net, [(0, 16)])


############## Duration matching ##############

def _clip(num_frames, fps=10.0):
    frames = torch.arange(num_frames, dtype=torch.float32).reshape(-1, 1, 1, 1).expand(-1, 1, 2, 2) / 100
    return VideoClip(frames.contiguous(), fps)


def _audio(seconds, rate=1000):
    return AudioTrack(np.zeros(int(round(seconds * rate)), dtype=np.float32), rate)


def test_palindrome_indices():
    assert palindrome_indices(3, 8).tolist() == [0, 1, 2, 2, 1, 0, 0, 1]
    assert palindrome_indices(1, 3).tolist() == [0, 0, 0]


def test_match_duration_trims():
    out = match_duration(_clip(20), _audio(1.2))
    assert out.num_frames == 12
    assert torch.equal(out.frames, _clip(20).frames[:12])
    assert out.audio is not None


def test_match_duration_extends_with_smoothed_turns():
    src = _clip(5)
    out = match_duration(src, _audio(1.2), junction_smooth_frames=1)
    assert out.num_frames == 12
    raw = src.frames[torch.from_numpy(palindrome_indices(5, 12))]
    smoothed = {4, 5, 9, 10}
    for t in range(12):
        if t in smoothed:
            assert torch.allclose(out.frames[t], raw[max(0, t - 1):t + 2].mean(dim=0))
        else:
            assert torch.equal(out.frames[t], raw[t])


def test_match_duration_without_smoothing():
    out = match_duration(_clip(4), _audio(1.0), junction_smooth_frames=0)
    assert [round(float(v) * 100) for v in out.frames[:, 0, 0, 0]] == [0, 1, 2, 3, 3, 2, 1, 0, 0, 1]


def test_match_duration_rounds_half_up():
    assert match_duration(_clip(20), _audio(0.45)).num_frames == 5


def test_match_duration_empty_audio():
    with pytest.raises(InferenceError) as e:
        match_duration(_clip(4), _audio(0.0))
    assert e.value.code == "EMPTY_VIDEO"


############## Compositing ##############

def test_composite_only_touches_face_region():
    src = VideoClip(torch.rand(2, 3, 32, 32), 25.0)
    gen = VideoClip(torch.ones(2, 3, 8, 8), 25.0)
    boxes = [BoundingBox(8, 8, 16, 16)] * 2
    out = composite(src, gen, boxes, boxes, dilation_px=2)
    inside = torch.zeros(32, 32, dtype=torch.bool)
    inside[8:16, 8:16] = True
    assert (out.frames[:, :, inside] == 1).all()
    assert torch.equal(out.frames[:, :, ~inside], src.frames[:, :, ~inside])


def test_composite_region_is_union_of_dilated_boxes():
    src = VideoClip(torch.zeros(1, 1, 32, 32), 25.0)
    gen = VideoClip(torch.ones(1, 1, 32, 32), 25.0)
    crop = [BoundingBox(0, 0, 32, 32)]
    out = composite(src, gen, [BoundingBox(4, 4, 8, 8)], [BoundingBox(20, 20, 24, 26)], dilation_px=1, crop_boxes=crop)
    expected = torch.zeros(32, 32)
    expected[3:27, 3:25] = 1
    assert torch.equal(out.frames[0, 0], expected)


def test_composite_shape_checks():
    src = VideoClip(torch.zeros(2, 3, 8, 8), 25.0)
    box = [BoundingBox(0, 0, 4, 4)] * 2
    with pytest.raises(ShapeMismatch):
        composite(src, VideoClip(torch.zeros(1, 3, 4, 4), 25.0), box, box)
    with pytest.raises(ShapeMismatch):
        composite(src, VideoClip(torch.zeros(2, 1, 4, 4), 25.0), box, box)


############## Face tracking ##############

def test_square_box_and_coordinate_maps():
    sq = square_box(BoundingBox(10, 20, 30, 60))
    assert sq.as_tuple() == (0, 20, 40, 60)
    crop = BoundingBox(10, 10, 50, 50)
    face = BoundingBox(20, 20, 40, 40)
    inner = to_crop_coords(face, crop, 20)
    assert inner.as_tuple() == (5, 5, 15, 15)
    assert from_crop_coords(inner, crop, 20).as_tuple() == face.as_tuple()


def test_track_faces_on_synthetic_clip():
    clip, _ = make_synthetic_clip(num_frames=6, size=64, seed=0, blank_frames=(2,))
    faces, crops = track_faces(clip, StubDetector(), expand_ratio=0.25, alpha=0.75)
    assert len(faces) == len(crops) == 6
    assert faces[0].as_tuple() == (16, 16, 48, 48)
    assert faces[2].as_tuple() == faces[1].as_tuple()
    assert all(abs(c.width - c.height) < 1e-9 for c in crops)
    face_crop = crop_faces(clip, crops, 32)
    assert face_crop.frames.shape == (6, 3, 32, 32)


############## Pipeline ##############

@pytest.fixture
def checkpoint(tiny_config, tmp_path):
    runner = Runner(tiny_config, run_dir=str(tmp_path / "run"))
    runner.run_loop(steps=1)
    return str(tmp_path / "run" / CHECKPOINT_NAME)


def test_pipeline_is_deterministic(checkpoint):
    pipe = InferencePipeline.from_checkpoint(checkpoint)
    video, _ = make_synthetic_clip(num_frames=10, size=64, seed=1)
    audio = AudioTrack(np.random.default_rng(0).standard_normal(9600).astype(np.float32) * 0.1, 16000)
    a = pipe(video, audio, seed=3)
    b = pipe(video, audio, seed=3)
    assert a.num_frames == 15
    assert a.frames.shape == (15, 3, 64, 64)
    assert torch.equal(a.frames, b.frames)
    assert a.audio is audio


def test_pipeline_run_needs_audio(checkpoint, tmp_path):
    from lsdiff.media import save_video
    video, _ = make_synthetic_clip(num_frames=10, size=64, seed=1)
    src = save_video(VideoClip(video.frames, video.fps), str(tmp_path / "silent"))
    pipe = InferencePipeline.from_checkpoint(checkpoint)
    with pytest.raises(InferenceError) as e:
        pipe.run(src, str(tmp_path / "out"))
    assert e.value.code == "NO_AUDIO"


def test_match_duration_palindrome_end_frame():
    src = _clip(25, fps=25.0)
    out = match_duration(src, _audio(2.0), junction_smooth_frames=0)
    assert out.num_frames == 50
    assert torch.equal(out.frames[49], src.frames[0])
    same = match_duration(src, _audio(1.0))
    assert torch.equal(same.frames, src.frames)


def test_composite_with_source_crop_is_identity():
    src = VideoClip(torch.rand(2, 3, 32, 32), 25.0)
    boxes = [BoundingBox(4, 6, 20, 22)] * 2
    gen = VideoClip(src.frames[:, :, 6:22, 4:20].clone(), 25.0)
    out = composite(src, gen, boxes, boxes, dilation_px=0)
    assert torch.equal(out.frames, src.frames)
