import numpy as np
import pytest
import torch

from lsdiff.errors import MediaError
from lsdiff.media import (AudioTrack, BoundingBox, LandmarkSequence, VideoClip, load_audio, load_landmarks,
                          load_video, resample_audio, save_audio, save_landmarks, save_video)


def test_box_geometry():
    a = BoundingBox(0, 0, 10, 20)
    assert a.width == 10 and a.height == 20 and a.area == 200
    assert a.center == (5, 10)
    assert a.dilate(2).as_tuple() == (-2, -2, 12, 22)
    assert a.expand(0.5).as_tuple() == (-5, -10, 15, 30)
    assert a.union(BoundingBox(30, 30, 40, 40)).as_tuple() == (0, 0, 40, 40)
    assert BoundingBox(-5, 3, 70, 90).clamp(64, 64).as_tuple() == (0, 3, 64, 64)
    assert BoundingBox(3, 3, 3, 8).is_degenerate


def test_to_pixels_rounds_half_up():
    assert BoundingBox(0.5, 1.5, 2.4, 2.5).to_pixels() == (1, 2, 2, 3)


def test_clip_validation():
    with pytest.raises(MediaError) as e:
        VideoClip(torch.zeros(3, 8, 8), 25.0)
    assert e.value.code == "SHAPE_MISMATCH"
    with pytest.raises(MediaError) as e:
        VideoClip(torch.zeros(2, 3, 8, 8), 0.0)
    assert e.value.code == "INVALID_RATE"
    bad = torch.zeros(2, 3, 8, 8)
    bad[1, 0, 0, 0] = float("nan")
    with pytest.raises(MediaError) as e:
        VideoClip(bad, 25.0)
    assert e.value.code == "NONFINITE_INPUT"
    with pytest.raises(MediaError) as e:
        VideoClip(torch.zeros(25, 3, 8, 8), 25.0, AudioTrack(np.zeros(32000), 16000))
    assert e.value.code == "AUDIO_MISALIGNED"


def test_clip_slice_cuts_audio():
    clip = VideoClip(torch.rand(50, 1, 4, 4), 25.0, AudioTrack(np.zeros(32000), 16000))
    part = clip.slice(10, 35)
    assert part.num_frames == 25
    assert len(part.audio.samples) == 16000


def test_png_directory_round_trip(tmp_path):
    frames = torch.randint(0, 256, (5, 3, 8, 12)).float() / 255
    audio = AudioTrack(np.sin(np.linspace(0, 20, 3200)).astype(np.float32) * 0.5, 16000)
    clip = VideoClip(frames, 25.0, audio)
    out = save_video(clip, str(tmp_path / "clip"))
    loaded = load_video(out)
    assert loaded.fps == 25.0
    assert torch.allclose(loaded.frames, frames, atol=1e-6)
    assert np.allclose(loaded.audio.samples, audio.samples, atol=1e-4)


def test_mp4_round_trip_keeps_audio(tmp_path):
    rate = 16000
    t = np.arange(rate, dtype=np.float32) / rate
    tone = (0.5 * np.sin(2 * np.pi * 440.0 * t)).astype(np.float32)
    frames = torch.rand(25, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    out = save_video(VideoClip(frames, 25.0, AudioTrack(tone, rate)), str(tmp_path / "talk.mp4"))
    assert not (tmp_path / "talk.wav").exists()

    loaded = load_video(out)
    assert loaded.num_frames == 25
    assert loaded.audio is not None
    assert loaded.audio.sample_rate == rate
    assert len(loaded.audio.samples) == rate
    samples = loaded.audio.samples.astype(np.float64)
    rms = np.sqrt(np.mean(samples ** 2))
    assert abs(rms - 0.5 / np.sqrt(2)) < 0.2 * 0.5 / np.sqrt(2)
    spectrum = np.abs(np.fft.rfft(samples))
    assert np.argmax(spectrum) * rate / len(samples) == pytest.approx(440.0, abs=2.0)


def test_mp4_without_audio_loads_silent(tmp_path):
    frames = torch.rand(5, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    loaded = load_video(save_video(VideoClip(frames, 25.0), str(tmp_path / "mute.mp4")))
    assert loaded.audio is None


def test_grayscale_round_trip(tmp_path):
    frames = torch.randint(0, 256, (3, 1, 6, 6)).float() / 255
    loaded = load_video(save_video(VideoClip(frames, 10.0), str(tmp_path / "gray")))
    assert loaded.channels == 1
    assert torch.allclose(loaded.frames, frames, atol=1e-6)


def test_load_missing_video(tmp_path):
    with pytest.raises(MediaError) as e:
        load_video(str(tmp_path / "nope.mp4"))
    assert e.value.code == "UNREADABLE_MEDIA"


def test_audio_io_and_resample(tmp_path):
    track = AudioTrack(np.zeros(16000, dtype=np.float32), 16000)
    fpath = save_audio(track, str(tmp_path / "a.wav"))
    assert load_audio(fpath).sample_rate == 16000
    down = resample_audio(track, 8000)
    assert down.sample_rate == 8000 and len(down.samples) == 8000
    assert resample_audio(track, 16000) is track
    with pytest.raises(MediaError):
        resample_audio(track, 0)


def test_landmarks_round_trip(tmp_path):
    seq = LandmarkSequence((np.array([[1.0, 2.0], [3.0, 4.0]]), None), 8, 8)
    loaded = load_landmarks(save_landmarks(seq, str(tmp_path / "lm.json")), 8, 8)
    assert loaded[1] is None
    assert np.array_equal(loaded[0], seq[0])


def test_landmarks_outside_frame():
    with pytest.raises(MediaError):
        LandmarkSequence((np.array([[9.0, 1.0]]),), 8, 8)
