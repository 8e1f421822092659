import numpy as np
import pytest

from ccl_av.synthdata import (
    DatasetSpec,
    blob_region,
    dataset_iter,
    frame_brightness,
    frame_envelope,
    generate_pair,
    sync_score,
)
from ccl_av.tarp import GridMeta
from ccl_av.tensor import ContractError

SPEC = DatasetSpec()


def test_degenerate_sample_is_constant():
    s = generate_pair(DatasetSpec(noise_std=0.0, event_rate=0.0), 3)
    assert (s.video == 0).all() and (s.audio == 0).all()
    assert not s.fg_video_mask.any() and not s.fg_audio_mask.any() and s.event_frames == []


def test_event_alignment_and_masks():
    for i in range(200):
        s = generate_pair(SPEC, i)
        if 2 in s.event_frames:
            assert s.fg_audio_mask[8:12].all()
            break
    else:
        pytest.fail("no sample with an event at frame 2")
    for i in range(50):
        s = generate_pair(SPEC, i)
        want = np.zeros(32, bool)
        for f in s.event_frames:
            want[f * 4 : (f + 1) * 4] = True
        assert np.array_equal(s.fg_audio_mask, want)
        region = blob_region(SPEC.grid, s.class_id)
        for f in range(8):
            assert np.array_equal(s.fg_video_mask[f], region if f in s.event_frames else np.zeros_like(region))


def test_generation_is_deterministic():
    a, b = generate_pair(SPEC, 17), generate_pair(SPEC, 17)
    assert np.array_equal(a.audio, b.audio) and np.array_equal(a.video, b.video) and a.class_id == b.class_id


def test_spec_validation():
    with pytest.raises(ContractError):
        DatasetSpec(event_rate=1.0)
    with pytest.raises(ContractError):
        DatasetSpec(noise_std=-1.0)


def test_ground_truth_pairs_are_in_sync():
    scores = []
    for i in range(100):
        s = generate_pair(SPEC, i)
        if 0 < len(s.event_frames) < 8:
            scores.append(sync_score(s.audio, s.video, blob_region(SPEC.grid, s.class_id)))
    assert min(scores) >= 0.9


def test_mismatched_pairs_are_not():
    scores = []
    for i in range(100):
        a, v = generate_pair(SPEC, i), generate_pair(SPEC, 1000 + i)
        scores.append(sync_score(a.audio, v.video, blob_region(SPEC.grid, v.class_id)))
    assert abs(np.mean(scores)) < 0.3


def test_constant_video_gives_flagged_zero():
    s = generate_pair(SPEC, 0)
    score, flag = sync_score(s.audio, np.ones_like(s.video), return_flag=True)
    assert score == 0.0 and flag


def test_sync_score_envelope_definition():
    grid = GridMeta(8, 4, 1, 1)
    audio = np.zeros((8, 2), np.float32)
    audio[2:4] = 3.0
    assert np.allclose(frame_envelope(audio, grid), [0, 3, 0, 0])
    video = np.zeros((4, 1, 1, 2))
    video[1] = 1.0
    assert np.allclose(frame_brightness(video), [0, 1, 0, 0])
    assert sync_score(audio, video) == pytest.approx(1.0)


def test_dataset_iter_determinism_and_class_balance():
    spec = DatasetSpec(n_samples=10_000)
    a = [b.indices.tolist() for _, b in zip(range(5), dataset_iter(spec, 1, np.random.default_rng(3)))]
    b = [b.indices.tolist() for _, b in zip(range(5), dataset_iter(spec, 1, np.random.default_rng(3)))]
    assert a == b
    classes = np.array([int(np.random.default_rng([0, i]).integers(4)) for i in range(10_000)])
    assert np.allclose(np.bincount(classes) / 10_000, 0.25, atol=0.02)
    assert all(generate_pair(spec, i).class_id == classes[i] for i in range(50))
    batch = next(dataset_iter(SPEC, 4, np.random.default_rng(0)))
    assert batch.video.shape == (4, 8, 4, 4, 4) and batch.audio.shape == (4, 32, 4)


def test_event_envelope_peaks_inside_event_window():
    for i in range(60):
        s = generate_pair(SPEC, i)
        if not s.event_frames:
            continue
        env = np.sqrt((s.audio.astype(np.float64) ** 2).mean(-1))
        j = int(np.argmax(env))
        assert any(f * 4 <= j < (f + 1) * 4 for f in s.event_frames)


def test_foreground_power_exceeds_background_by_contrast():
    for i in range(30):
        s = generate_pair(SPEC, i)
        if not s.event_frames:
            continue
        fg_a = (s.audio[s.fg_audio_mask] ** 2).mean()
        bg_a = (s.audio[~s.fg_audio_mask] ** 2).mean()
        fg_v = (s.video[s.fg_video_mask] ** 2).mean()
        bg_v = (s.video[~s.fg_video_mask] ** 2).mean()
        assert fg_a >= SPEC.contrast * bg_a and fg_v >= SPEC.contrast * bg_v
