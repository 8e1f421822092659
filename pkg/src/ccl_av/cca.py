"""Cross-modal context attention.

Each transformer block holds two attention directions:

* ``a2v``: video queries read audio latents (windowed) and the audio-context
  token bank ``L_a`` (``n_a x d_v``). Its output updates the video stream.
* ``v2a``: audio queries read the nearest video frame and the video-context
  token bank ``L_v`` (``n_v x d_a``). Its output updates the audio stream.

Latent queries and keys carry temporally aligned rotary embeddings. Context
tokens carry none, and their logits are taken against the unrotated query so
the token bank looks the same from every time step. Keys and values are
concatenated latents first, context tokens last.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dcr import Gates, RoutingPlan
from .tarp import (
    DEFAULT_ROPE_BASE,
    GridMeta,
    WindowMap,
    apply_rope_angles,
    audio_rope_positions,
    partition_audio_kv,
    partition_video_kv,
    rope_angles,
    tile_heads,
    video_frame_positions,
)
from .tensor import ContractError, DimensionError, Tensor

LCT_INIT_STD = 0.02


@dataclass
class CCAParams:
    """Parameter views for both attention directions of one block.

    ``a2v`` and ``v2a`` map names (``wq``, ``wk``, ``wv``, ``wo``, the two
    input norms and, when context tokens exist, ``lct``, ``wk_lct``,
    ``wv_lct``) to tensors owned by the video and audio stream respectively.
    """

    a2v: dict
    v2a: dict
    heads_a: int
    heads_v: int

    @property
    def n_a(self) -> int:
        return self.a2v["lct"].shape[0] if "lct" in self.a2v else 0

    @property
    def n_v(self) -> int:
        return self.v2a["lct"].shape[0] if "lct" in self.v2a else 0


@dataclass(frozen=True)
class LearnableContextTokens:
    L_a: Tensor | None
    L_v: Tensor | None


def context_tokens(params: CCAParams) -> LearnableContextTokens:
    return LearnableContextTokens(params.a2v.get("lct"), params.v2a.get("lct"))


def project_cross_qkv(x_a: Tensor, x_v: Tensor, params: CCAParams) -> dict[str, Tensor]:
    """Project both streams so queries keep their own width and keys/values take the other's."""
    d_a = params.v2a["wq"].shape[0]
    d_v = params.a2v["wq"].shape[0]
    if x_a.shape[-1] != d_a or x_v.shape[-1] != d_v:
        raise DimensionError(f"expected widths d_a={d_a}, d_v={d_v}; got {x_a.shape} and {x_v.shape}")
    return {
        "q_a": x_a @ params.v2a["wq"],
        "k_a": x_a @ params.a2v["wk"],
        "v_a": x_a @ params.a2v["wv"],
        "q_v": x_v @ params.a2v["wq"],
        "k_v": x_v @ params.v2a["wk"],
        "v_v": x_v @ params.v2a["wv"],
    }


def assemble_context_kv(
    k_part: Tensor | None,
    v_part: Tensor | None,
    lct: Tensor | None,
    wk_lct: Tensor | None,
    wv_lct: Tensor | None,
    rows: int,
) -> tuple[Tensor, Tensor]:
    """Concatenate partitioned latent keys/values with projected context tokens.

    Context tokens are projected once and repeated across ``rows``. Either
    source may be absent, but not both.
    """
    ks, vs = [], []
    if k_part is not None:
        if k_part.shape[0] != rows:
            raise DimensionError(f"partitioned keys have {k_part.shape[0]} rows, expected {rows}")
        ks.append(k_part)
        vs.append(v_part)
    if lct is not None and lct.shape[0] > 0:
        kl = lct @ wk_lct
        vl = lct @ wv_lct
        ks.append(T.broadcast_to(T.reshape(kl, (1,) + kl.shape), (rows,) + kl.shape))
        vs.append(T.broadcast_to(T.reshape(vl, (1,) + vl.shape), (rows,) + vl.shape))
    if not ks:
        raise ContractError("no key/value source to attend to")
    if len(ks) == 1:
        return ks[0], vs[0]
    return T.concat(ks, axis=1), T.concat(vs, axis=1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    rows, n, d = x.shape
    return T.transpose(T.reshape(x, (rows, n, heads, d // heads)), (0, 2, 1, 3))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_map: bool = False):
    """Multi-head softmax attention over ``(rows, len, dim)`` inputs.

    Returns ``(output, attn_map)``; the map is the head-averaged probability
    array ``(rows, q_len, kv_len)`` when requested, else ``None``.
    """
    rows, lq, d = q.shape
    if k.shape[0] != rows or v.shape[:2] != k.shape[:2] or k.shape[-1] != d:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if d % heads or v.shape[-1] % heads:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    logits = T.matmul(qh * (1.0 / math.sqrt(dh)), T.transpose(kh, (0, 1, 3, 2)))
    probs = T.softmax_lastdim(logits)
    out = T.matmul(probs, vh)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (rows, lq, v.shape[-1]))
    attn = probs.data.mean(axis=1) if return_map else None
    return out, attn


def context_attention(
    q: Tensor,
    k_lat: Tensor | None,
    v_lat: Tensor | None,
    k_lct: Tensor | None,
    v_lct: Tensor | None,
    heads: int,
    return_map: bool = False,
    q_ctx: Tensor | None = None,
):
    """Attention over ``concat(latent keys, context keys)`` without repeating the context.

    Context-token logits use ``q_ctx`` (default ``q``). With the default this
    equals ``scaled_attention(q, *assemble_context_kv(...))``; context-token
    logits are computed with one shared product instead of a per-row copy.
    """
    rows, lq, d = q.shape
    if d % heads:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    if k_lat is None and k_lct is None:
        raise ContractError("no key/value source to attend to")
    dh = d // heads
    qh = _split_heads(q, heads) * (1.0 / math.sqrt(dh))
    logits, sizes = [], []
    if k_lat is not None:
        if k_lat.shape[0] != rows:
            raise DimensionError(f"partitioned keys have {k_lat.shape[0]} rows, expected {rows}")
        logits.append(T.matmul(qh, T.transpose(_split_heads(k_lat, heads), (0, 1, 3, 2))))
        sizes.append(k_lat.shape[1])
    if k_lct is not None:
        n = k_lct.shape[0]
        qc = qh if q_ctx is None else _split_heads(q_ctx, heads) * (1.0 / math.sqrt(dh))
        q_flat = T.reshape(T.transpose(qc, (1, 0, 2, 3)), (heads, rows * lq, dh))
        kl = T.transpose(T.reshape(k_lct, (n, heads, dh)), (1, 2, 0))
        lg = T.reshape(T.matmul(q_flat, kl), (heads, rows, lq, n))
        logits.append(T.transpose(lg, (1, 0, 2, 3)))
        sizes.append(n)
    probs = T.softmax_lastdim(logits[0] if len(logits) == 1 else T.concat(logits, axis=-1))
    pieces = [probs] if len(sizes) == 1 else T.split(probs, sizes, axis=-1)
    outs = []
    if k_lat is not None:
        outs.append(T.matmul(pieces[0], _split_heads(v_lat, heads)))
    if k_lct is not None:
        n = k_lct.shape[0]
        p_flat = T.reshape(T.transpose(pieces[-1], (1, 0, 2, 3)), (heads, rows * lq, n))
        vl = T.transpose(T.reshape(v_lct, (n, heads, dh)), (1, 0, 2))
        o = T.reshape(T.matmul(p_flat, vl), (heads, rows, lq, dh))
        outs.append(T.transpose(o, (1, 0, 2, 3)))
    out = outs[0] if len(outs) == 1 else outs[0] + outs[1]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (rows, lq, d))
    attn = probs.data.mean(axis=1) if return_map else None
    return out, attn


def _direction(
    xq: Tensor,
    xkv: Tensor | None,
    p: dict,
    heads: int,
    q_angles: np.ndarray,
    k_angles: np.ndarray,
    q_rows: tuple[int, int],
    partition,
    use_latent: bool,
    use_lct: bool,
    record: bool,
):
    b, n, d = xq.shape
    q_raw = T.layer_norm(xq, p["norm_q_w"], p["norm_q_b"]) @ p["wq"]
    rows, lq = q_rows
    q = T.reshape(apply_rope_angles(q_raw, q_angles), (rows, lq, d))
    # the query/context-token pair carries no rotary encoding at all
    q_ctx = T.reshape(q_raw, (rows, lq, d))
    k_part = v_part = None
    if use_latent:
        kv_in = T.layer_norm(xkv, p["norm_kv_w"], p["norm_kv_b"])
        k = apply_rope_angles(kv_in @ p["wk"], k_angles)
        v = kv_in @ p["wv"]
        k_part, v_part = partition(k, v)
    lct = p.get("lct") if use_lct else None
    k_lct = lct @ p["wk_lct"] if lct is not None else None
    v_lct = lct @ p["wv_lct"] if lct is not None else None
    out, attn = context_attention(q, k_part, v_part, k_lct, v_lct, heads, return_map=record, q_ctx=q_ctx)
    delta = T.reshape(out, (b, n, d)) @ p["wo"]
    n_lct = lct.shape[0] if lct is not None else 0
    return delta, attn, n_lct


def cca_block_forward(
    x_a: Tensor | None,
    x_v: Tensor | None,
    params: CCAParams,
    wmap: WindowMap,
    meta: GridMeta,
    plan: RoutingPlan,
    gates: Gates | None = None,
    record: bool = False,
    rope_base: float = DEFAULT_ROPE_BASE,
):
    """Residual updates for both streams from cross-modal context attention.

    The routing plan decides which key/value sources each direction uses; when
    ``gates`` is given the block behaves as the gated baseline instead (other
    stream's latents only, no context tokens, skipped when the gate is 0).
    Returns ``(delta_audio, delta_video, maps)`` where a ``None`` delta means no
    update and ``maps`` holds ``(attn, n_lct)`` per direction when recording.
    """
    maps: dict = {}
    d_a = params.v2a["wq"].shape[0]
    d_v = params.a2v["wq"].shape[0]
    b = (x_a if x_a is not None else x_v).shape[0]

    def sources(stream: str):
        route = plan.stream(stream)
        if gates is not None:
            return gates.stream(stream) == 1, False
        return route.use_cross_latent, route.use_lct

    def kv_source(x: Tensor, stream: str) -> Tensor:
        return T.detach(x) if plan.stream(stream).is_reference else x

    delta_v = None
    if x_v is not None and plan.video.active:
        use_latent, use_lct = sources("video")
        use_lct = use_lct and params.n_a > 0
        if use_latent and x_a is None:
            raise ContractError("video attends to audio latents but audio stream is absent")
        if use_latent or use_lct:
            audio_ang, video_ang = _cross_angles(meta, d_v // params.heads_v, params.heads_v, rope_base)
            delta_v, attn, n_lct = _direction(
                x_v,
                kv_source(x_a, "audio") if use_latent else None,
                params.a2v,
                params.heads_v,
                video_ang,
                audio_ang,
                (b * meta.t_v, meta.hw),
                lambda k, v: partition_audio_kv(k, v, wmap),
                use_latent,
                use_lct,
                record,
            )
            if record:
                maps["a2v"] = (attn, n_lct)

    delta_a = None
    if x_a is not None and plan.audio.active:
        use_latent, use_lct = sources("audio")
        use_lct = use_lct and params.n_v > 0
        if use_latent and x_v is None:
            raise ContractError("audio attends to video latents but video stream is absent")
        if use_latent or use_lct:
            audio_ang, video_ang = _cross_angles(meta, d_a // params.heads_a, params.heads_a, rope_base)
            delta_a, attn, n_lct = _direction(
                x_a,
                kv_source(x_v, "video") if use_latent else None,
                params.v2a,
                params.heads_a,
                audio_ang,
                video_ang,
                (b * meta.t_a, 1),
                lambda k, v: partition_video_kv(k, v, wmap, meta),
                use_latent,
                use_lct,
                record,
            )
            if record:
                maps["v2a"] = (attn, n_lct)
    return delta_a, delta_v, maps


@functools.lru_cache(maxsize=64)
def _cross_angles(meta: GridMeta, head_dim: int, heads: int, base: float):
    audio = tile_heads(rope_angles(audio_rope_positions(meta), head_dim, base), heads)
    video = tile_heads(rope_angles(video_frame_positions(meta), head_dim, base), heads)
    audio.setflags(write=False)
    video.setflags(write=False)
    return audio, video


def lct_mass(attn: np.ndarray, n_lct: int) -> np.ndarray:
    """Per-query attention mass on the trailing context-token columns."""
    if n_lct == 0:
        return np.zeros(attn.shape[:-1], dtype=attn.dtype)
    return attn[..., -n_lct:].sum(axis=-1)
