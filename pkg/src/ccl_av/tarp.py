"""Temporally aligned rotary embeddings and cross-modal window partitioning.

Audio tokens outnumber video frames, so audio rotary positions are rescaled
onto the video frame axis. Cross-modal attention is restricted to a local
temporal neighbourhood: each video frame sees ``s = 3c`` audio tokens around
its aligned span, and each audio token sees the spatial tokens of its nearest
video frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, custom_op, reshape, take

DEFAULT_ROPE_BASE = 10000.0


@dataclass(frozen=True)
class GridMeta:
    t_a: int
    t_v: int
    h: int
    w: int

    def __post_init__(self):
        if self.t_a < 1:
            raise ContractError("t_a must be positive")
        if not self.t_a >= self.t_v >= 1:
            raise ContractError(f"need t_a >= t_v >= 1, got t_a={self.t_a}, t_v={self.t_v}")
        if self.h < 1 or self.w < 1:
            raise ContractError(f"spatial extents must be positive, got h={self.h}, w={self.w}")

    @property
    def s_v(self) -> int:
        return self.t_v * self.h * self.w

    @property
    def hw(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class WindowMap:
    """Index maps used to partition cross-modal keys and values.

    ``audio_window_indices[i]`` lists the ``s`` audio tokens visible from video
    frame ``i``; ``video_key_indices[j]`` lists the flattened video tokens
    visible from audio token ``j`` (one frame's ``h*w`` tokens).
    """

    c: int
    s: int
    centers: np.ndarray
    audio_window_indices: np.ndarray
    video_frame_of_audio: np.ndarray
    video_key_indices: np.ndarray
    full_span: bool = False


def audio_rope_positions(meta: GridMeta) -> np.ndarray:
    """Audio token positions expressed in video-frame units, ``j * t_v / t_a``."""
    if meta.t_a == 0:
        raise ContractError("t_a must be positive")
    # multiply before dividing so t_a == t_v gives exact integers
    return np.arange(meta.t_a, dtype=np.float64) * meta.t_v / meta.t_a


def video_frame_positions(meta: GridMeta) -> np.ndarray:
    """Temporal position of every flattened video token (its frame index)."""
    return np.repeat(np.arange(meta.t_v, dtype=np.float64), meta.hw)


def rope_angles(positions, dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotation angles ``pos * base**(-2k/dim)`` of shape ``(len, dim // 2)``."""
    if dim % 2:
        raise ContractError(f"rotary dimension must be even, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return positions[:, None] * inv_freq[None, :]


def factorized_angles(axes_positions, axes_dims, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Concatenate per-axis rotary angles; axes with zero dims are skipped."""
    parts = [rope_angles(p, d, base) for p, d in zip(axes_positions, axes_dims) if d > 0]
    return np.concatenate(parts, axis=-1)


def video_self_angles(meta: GridMeta, head_dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """(t, h, w) factorized angles for stream-internal video attention."""
    d_hw = 2 * (head_dim // 6)
    d_t = head_dim - 2 * d_hw
    t, y, x = np.meshgrid(np.arange(meta.t_v), np.arange(meta.h), np.arange(meta.w), indexing="ij")
    return factorized_angles([t.ravel(), y.ravel(), x.ravel()], [d_t, d_hw, d_hw], base)


def tile_heads(angles: np.ndarray, heads: int) -> np.ndarray:
    """Repeat per-head angles so a rotation over the full width acts per head."""
    return np.tile(angles, (1, heads))


def apply_rope_angles(x: Tensor, angles: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by ``angles``.

    ``angles`` broadcasts against ``x.shape[:-1] + (x.shape[-1] // 2,)``.
    """
    d = x.shape[-1]
    if d % 2:
        raise ContractError(f"rotary dimension must be even, got {d}")
    if angles.shape[-1] != d // 2:
        raise DimensionError(f"angles last dim {angles.shape[-1]} != {d // 2}")
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    xd = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    x0, x1 = xd[..., 0], xd[..., 1]
    out = np.empty_like(xd)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos
    shape = x.shape

    def bw(g):
        gd = g.reshape(shape[:-1] + (d // 2, 2))
        g0, g1 = gd[..., 0], gd[..., 1]
        gx = np.empty_like(gd)
        gx[..., 0] = g0 * cos + g1 * sin
        gx[..., 1] = -g0 * sin + g1 * cos
        return (gx.reshape(shape),)

    return custom_op(out.reshape(shape), (x,), bw, "rope")


def apply_rope(x: Tensor, positions, base: float = DEFAULT_ROPE_BASE) -> Tensor:
    """Standard rotary embedding over the last axis at real-valued positions.

    ``x`` is ``(..., len, d)`` and ``positions`` has length ``len``.
    """
    if x.ndim < 2:
        raise DimensionError("apply_rope expects (..., len, d)")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"{len(positions)} positions for sequence length {x.shape[-2]}")
    return apply_rope_angles(x, rope_angles(positions, x.shape[-1], base))


def build_window_map(meta: GridMeta, full_span: bool = False) -> WindowMap:
    """Compute the audio windows per video frame and the frame per audio token.

    With ``full_span`` every query sees every key of the other stream; this is
    only used to reduce the module to plain dense cross-attention.
    """
    c = meta.t_a // meta.t_v
    centers = np.floor(c / 2 + c * np.arange(meta.t_v)).astype(np.int64)
    frame_of_audio = np.minimum(np.arange(meta.t_a) * meta.t_v // meta.t_a, meta.t_v - 1)
    if full_span:
        s = meta.t_a
        windows = np.tile(np.arange(meta.t_a), (meta.t_v, 1))
        video_keys = np.tile(np.arange(meta.s_v), (meta.t_a, 1))
    else:
        s = 3 * c
        start = centers - s // 2
        windows = np.clip(start[:, None] + np.arange(s)[None, :], 0, meta.t_a - 1)
        video_keys = frame_of_audio[:, None] * meta.hw + np.arange(meta.hw)[None, :]
    return WindowMap(
        c=c,
        s=s,
        centers=centers,
        audio_window_indices=windows.astype(np.int64),
        video_frame_of_audio=frame_of_audio.astype(np.int64),
        video_key_indices=video_keys.astype(np.int64),
        full_span=full_span,
    )


def _gather_rows(x: Tensor, index: np.ndarray, expect: int, what: str) -> Tensor:
    if x.ndim < 3 or x.shape[1] != expect:
        raise DimensionError(f"{what}: expected (b, {expect}, ...), got {x.shape}")
    g = take(x, index, axis=1)  # (b, rows, k, ...)
    b, r, k = g.shape[:3]
    return reshape(g, (b * r, k) + g.shape[3:])


def partition_audio_kv(k_a: Tensor, v_a: Tensor, wmap: WindowMap) -> tuple[Tensor, Tensor]:
    """Gather each video frame's audio window: ``(b, t_a, d) -> (b*t_v, s, d)``."""
    if k_a.shape != v_a.shape:
        raise DimensionError(f"key/value shapes differ: {k_a.shape} vs {v_a.shape}")
    t_a = len(wmap.video_frame_of_audio)
    return (
        _gather_rows(k_a, wmap.audio_window_indices, t_a, "partition_audio_kv"),
        _gather_rows(v_a, wmap.audio_window_indices, t_a, "partition_audio_kv"),
    )


def partition_video_kv(k_v: Tensor, v_v: Tensor, wmap: WindowMap, meta: GridMeta) -> tuple[Tensor, Tensor]:
    """Gather the nearest frame's tokens for every audio token: ``(b, s_v, d) -> (b*t_a, h*w, d)``."""
    if k_v.shape != v_v.shape:
        raise DimensionError(f"key/value shapes differ: {k_v.shape} vs {v_v.shape}")
    return (
        _gather_rows(k_v, wmap.video_key_indices, meta.s_v, "partition_video_kv"),
        _gather_rows(v_v, wmap.video_key_indices, meta.s_v, "partition_video_kv"),
    )
