"""Synthetic paired audio/video with known cross-modal structure.

A class picks a blob location and colour in the video and a channel pattern
in the audio. Each video frame independently hosts an event with probability
``event_rate``: the blob lights up in that frame and the audio tokens aligned
with the frame carry the class pattern. Everything else is independent
Gaussian background noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tarp import GridMeta
from .tensor import ContractError

C_SIG = 4
_CLASS_SEED = 0x5EED


@dataclass(frozen=True)
class DatasetSpec:
    grid: GridMeta = GridMeta(t_a=32, t_v=8, h=4, w=4)
    n_classes: int = 4
    event_rate: float = 0.3
    noise_std: float = 0.1
    seed: int = 0
    n_samples: int = 4096
    video_amp: float = 2.0
    audio_amp: float = 1.5
    contrast: float = 4.0
    c_sig: int = C_SIG

    def __post_init__(self):
        if not 0.0 <= self.event_rate < 1.0:
            raise ContractError(f"event_rate must lie in [0, 1), got {self.event_rate}")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")
        if self.n_classes < 1 or self.n_samples < 1:
            raise ContractError("n_classes and n_samples must be positive")


@dataclass
class AVSample:
    video: np.ndarray  # (t_v, h, w, c_sig)
    audio: np.ndarray  # (t_a, c_sig)
    class_id: int
    fg_video_mask: np.ndarray  # (t_v, h, w) bool
    fg_audio_mask: np.ndarray  # (t_a,) bool
    event_frames: list[int]


@dataclass
class AVBatch:
    video: np.ndarray
    audio: np.ndarray
    class_ids: np.ndarray
    fg_video_mask: np.ndarray
    fg_audio_mask: np.ndarray
    indices: np.ndarray


def blob_region(grid: GridMeta, class_id: int) -> np.ndarray:
    """Boolean ``(h, w)`` mask of the class blob: one quadrant-sized block."""
    bh, bw = max(1, grid.h // 2), max(1, grid.w // 2)
    q = class_id % 4
    y0 = 0 if q < 2 or grid.h < 2 else grid.h - bh
    x0 = 0 if q % 2 == 0 or grid.w < 2 else grid.w - bw
    mask = np.zeros((grid.h, grid.w), dtype=bool)
    mask[y0 : y0 + bh, x0 : x0 + bw] = True
    return mask


def class_patterns(spec: DatasetSpec, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Video colour ``(c_sig,)`` and audio pattern ``(c, c_sig)`` for a class.

    Independent of ``spec.seed`` so every dataset agrees on what a class means.
    """
    rng = np.random.default_rng([_CLASS_SEED, class_id])
    colour = rng.uniform(0.5, 1.0, spec.c_sig)
    c = spec.grid.t_a // spec.grid.t_v
    freq = 1 + class_id % 3
    phase = rng.uniform(0, 2 * np.pi, spec.c_sig)
    k = np.arange(c)[:, None]
    pattern = np.cos(2 * np.pi * freq * (k + 0.5) / max(c, 1) + phase[None, :])
    # keep every entry away from zero so the envelope is visible in all channels
    pattern = np.sign(pattern) * (0.5 + 0.5 * np.abs(pattern))
    return colour, pattern


def generate_pair(spec: DatasetSpec, index: int) -> AVSample:
    """Deterministic sample for ``(spec.seed, index)``."""
    g = spec.grid
    rng = np.random.default_rng([spec.seed, index])
    class_id = int(rng.integers(spec.n_classes))
    events = rng.random(g.t_v) < spec.event_rate
    video = spec.noise_std * rng.standard_normal((g.t_v, g.h, g.w, spec.c_sig))
    audio = spec.noise_std * rng.standard_normal((g.t_a, spec.c_sig))
    colour, pattern = class_patterns(spec, class_id)
    region = blob_region(g, class_id)
    c = g.t_a // g.t_v
    fg_video = np.zeros((g.t_v, g.h, g.w), dtype=bool)
    fg_audio = np.zeros(g.t_a, dtype=bool)
    event_frames = [int(f) for f in np.flatnonzero(events)]
    for f in event_frames:
        video[f][region] += spec.video_amp * colour
        fg_video[f] = region
        audio[f * c : (f + 1) * c] += spec.audio_amp * pattern
        fg_audio[f * c : (f + 1) * c] = True
    return AVSample(
        video=video.astype(np.float32),
        audio=audio.astype(np.float32),
        class_id=class_id,
        fg_video_mask=fg_video,
        fg_audio_mask=fg_audio,
        event_frames=event_frames,
    )


def collate(samples: list[AVSample], indices) -> AVBatch:
    return AVBatch(
        video=np.stack([s.video for s in samples]),
        audio=np.stack([s.audio for s in samples]),
        class_ids=np.array([s.class_id for s in samples], dtype=np.int64),
        fg_video_mask=np.stack([s.fg_video_mask for s in samples]),
        fg_audio_mask=np.stack([s.fg_audio_mask for s in samples]),
        indices=np.asarray(indices, dtype=np.int64),
    )


def get_batch(spec: DatasetSpec, indices) -> AVBatch:
    return collate([generate_pair(spec, int(i)) for i in indices], indices)


def dataset_iter(spec: DatasetSpec, batch: int, rng: np.random.Generator) -> Iterator[AVBatch]:
    """Endless batches drawn from reshuffled passes over ``spec.n_samples`` indices."""
    order = rng.permutation(spec.n_samples)
    pos = 0
    while True:
        idx = []
        while len(idx) < batch:
            if pos == len(order):
                order = rng.permutation(spec.n_samples)
                pos = 0
            take = min(batch - len(idx), len(order) - pos)
            idx.extend(order[pos : pos + take])
            pos += take
        yield get_batch(spec, idx)


def frame_envelope(audio: np.ndarray, grid: GridMeta) -> np.ndarray:
    """RMS of the audio tokens aligned with each video frame, shape ``(t_v,)``."""
    c = grid.t_a // grid.t_v
    spans = audio[: c * grid.t_v].reshape(grid.t_v, c, -1)
    return np.sqrt((spans.astype(np.float64) ** 2).mean(axis=(1, 2)))


def frame_brightness(video: np.ndarray, region: np.ndarray | None = None) -> np.ndarray:
    """Mean value inside ``region`` (or the whole frame) per frame."""
    v = video.astype(np.float64)
    if region is None:
        return v.mean(axis=(1, 2, 3))
    return v[:, region, :].mean(axis=(1, 2))


def sync_score(audio: np.ndarray, video: np.ndarray, region: np.ndarray | None = None, return_flag: bool = False):
    """Pearson correlation of the audio envelope with blob brightness across frames.

    A zero-variance series gives 0; with ``return_flag`` the result is
    ``(score, degenerate)``.
    """
    t_v = video.shape[0]
    t_a = audio.shape[0]
    if t_a < t_v:
        raise ContractError(f"audio ({t_a} tokens) shorter than video ({t_v} frames)")
    grid = GridMeta(t_a=t_a, t_v=t_v, h=video.shape[1], w=video.shape[2])
    env = frame_envelope(audio, grid)
    bright = frame_brightness(video, region)
    env_c = env - env.mean()
    bright_c = bright - bright.mean()
    denom = np.sqrt((env_c**2).sum() * (bright_c**2).sum())
    degenerate = bool(denom <= 1e-12 * max(1.0, np.abs(env).max() * np.abs(bright).max()))
    score = 0.0 if degenerate else float((env_c * bright_c).sum() / denom)
    return (score, degenerate) if return_flag else score
