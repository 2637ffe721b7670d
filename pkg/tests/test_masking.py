import numpy as np
import pytest
import torch

from lsdiff.errors import MaskError
from lsdiff.media import BoundingBox, LandmarkSequence, VideoClip
from lsdiff.masking import (MaskSequence, apply_mask, build_mask_sequence, fill_missing, fixed_mask_sequence,
                            landmarks_to_box, missing_runs, rasterize, smooth_boxes)


def _random_coords(rng, n):
    corner = rng.uniform(0, 80, size=(n, 2))
    return np.concatenate([corner, corner + rng.uniform(1, 20, size=(n, 2))], axis=1)


def _total_variation(boxes):
    coords = np.array([b.as_tuple() for b in boxes])
    return float(np.abs(np.diff(coords, axis=0)).sum())


def test_smooth_boxes_forward_average_exact():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        coords = _random_coords(rng, int(rng.integers(1, 12)))
        boxes = [BoundingBox.from_array(c) for c in coords]
        out = smooth_boxes(boxes, 0.75)
        for t in range(len(boxes) - 1):
            expected = tuple(0.75 * float(a) + 0.25 * float(b) for a, b in zip(coords[t], coords[t + 1]))
            assert out[t].as_tuple() == expected
        assert out[-1] == boxes[-1]


def test_landmarks_to_box_pads_and_clamps():
    seq = LandmarkSequence((np.array([[10.0, 10.0], [30.0, 20.0]]), None, np.array([[0.0, 0.0], [4.0, 4.0]])), 64, 64)
    boxes = landmarks_to_box(seq, 0.25)
    assert boxes[0].as_tuple() == (5.0, 7.5, 35.0, 22.5)
    assert boxes[1] is None
    assert boxes[2].as_tuple() == (0.0, 0.0, 5.0, 5.0)


def test_missing_runs():
    a = BoundingBox(0, 0, 1, 1)
    assert missing_runs([None, a, None, None, a, None]) == [(0, 1), (2, 4), (5, 6)]


def test_fill_missing_interpolates_interior_gap():
    left, right = BoundingBox(0, 0, 10, 10), BoundingBox(8, 8, 18, 18)
    out = fill_missing([left, None, None, None, right], max_gap=8)
    assert out[2].as_tuple() == (4.0, 4.0, 14.0, 14.0)
    assert out[0] == left and out[4] == right


def test_fill_missing_copies_at_ends():
    a = BoundingBox(1, 2, 3, 4)
    out = fill_missing([None, None, a, None], max_gap=8)
    assert out == [a, a, a, a]


def test_fill_missing_gap_allowance():
    a = BoundingBox(0, 0, 4, 4)
    fill_missing([a] + [None] * 8 + [a], max_gap=8)
    with pytest.raises(MaskError) as e:
        fill_missing([a] + [None] * 9 + [a], max_gap=8)
    assert e.value.code == "GAP_TOO_LONG"
    with pytest.raises(MaskError) as e:
        fill_missing([None, None], max_gap=8)
    assert e.value.code == "NO_FACE"


def test_rasterize_rounds_half_up():
    masks = rasterize([BoundingBox(0.5, 0.5, 2.5, 2.5)], 4, 4)
    expected = torch.zeros(1, 1, 4, 4)
    expected[0, 0, 1:3, 1:3] = 1
    assert torch.equal(masks, expected)


def test_rasterize_degenerate_box_is_empty():
    masks = rasterize([BoundingBox(2, 2, 2.2, 3)], 4, 4)
    assert masks.sum() == 0


def test_build_mask_sequence_on_synthetic(synthetic_clip):
    clip, landmarks = synthetic_clip
    masks = build_mask_sequence(landmarks, clip.height, clip.width)
    assert isinstance(masks, MaskSequence)
    assert masks.binary_masks.shape == (clip.num_frames, 1, clip.height, clip.width)
    cov = masks.coverage()
    assert ((cov > 0) & (cov < 1)).all()
    assert not any(masks.degenerate)


def test_apply_mask_only_touches_mask():
    clip = VideoClip(torch.rand(2, 3, 8, 8), 25.0)
    masks = fixed_mask_sequence(2, 8, 8)
    out = apply_mask(clip, masks)
    m = masks.binary_masks.bool().expand_as(clip.frames)
    assert (out.frames[m] == 0).all()
    assert torch.equal(out.frames[~m], clip.frames[~m])


def test_fixed_mask_is_static():
    masks = fixed_mask_sequence(4, 16, 16)
    assert all(torch.equal(masks.binary_masks[0], m) for m in masks.binary_masks)
    assert 0 < float(masks.coverage()[0]) < 1


def test_smoothing_never_adds_total_variation():
    rng = np.random.default_rng(1)
    for _ in range(200):
        boxes = [BoundingBox.from_array(c) for c in _random_coords(rng, int(rng.integers(2, 16)))]
        tv = _total_variation(boxes)
        for alpha in np.linspace(0.0, 1.0, 11):
            assert _total_variation(smooth_boxes(boxes, float(alpha))) <= tv + 1e-9


def test_drifting_track_total_variation_grows_with_alpha():
    steps = np.cumsum(np.random.default_rng(2).uniform(0.5, 3.0, size=10))
    boxes = [BoundingBox(s, s, s + 10, s + 10) for s in steps]
    tvs = [_total_variation(smooth_boxes(boxes, float(a))) for a in np.linspace(0.0, 1.0, 11)]
    assert all(b >= a - 1e-9 for a, b in zip(tvs, tvs[1:]))
    assert tvs[-1] == pytest.approx(_total_variation(boxes))
    m_lo = rasterize(smooth_boxes(boxes, 0.0), 64, 64)
    m_hi = rasterize(smooth_boxes(boxes, 1.0), 64, 64)
    assert (m_lo[1:] - m_lo[:-1]).abs().sum() <= (m_hi[1:] - m_hi[:-1]).abs().sum()


def _smoothed_coords(coords, alpha):
    return np.array([s.as_tuple() for s in smooth_boxes([BoundingBox.from_array(r) for r in coords], alpha)])


def test_smooth_boxes_is_linear():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 10))
        x, y = _random_coords(rng, n), _random_coords(rng, n)
        a, b = rng.uniform(0.1, 3.0, size=2)
        alpha = float(rng.uniform(0, 1))
        lhs = _smoothed_coords(a * x + b * y, alpha)
        assert np.allclose(lhs, a * _smoothed_coords(x, alpha) + b * _smoothed_coords(y, alpha))


def test_fill_missing_keeps_detected_entries_between_gaps():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n = int(rng.integers(2, 20))
        boxes = [BoundingBox.from_array(c) for c in _random_coords(rng, n)]
        detected = rng.uniform(size=n) < 0.5
        detected[int(rng.integers(n))] = True
        seq = [b if d else None for b, d in zip(boxes, detected)]
        out = fill_missing(seq, max_gap=n)
        assert len(out) == n
        assert all(b is not None for b in out)
        for i in np.flatnonzero(detected):
            assert out[i] is seq[i]
