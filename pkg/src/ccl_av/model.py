"""Dual-stream audio/video transformer.

Both streams have the same depth. Per block and per stream the residual order
is self-attention, text cross-attention, cross-modal attention, feed-forward;
every sub-layer is pre-normed. The cross-modal term is context attention
(``variant="ccl"``) or a binary-gated plain cross-attention
(``variant="gated"``).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cca import LCT_INIT_STD, CCAParams, cca_block_forward, scaled_attention
from .dcr import Gates, RoutingPlan, gated_baseline_plan
from .tarp import (
    DEFAULT_ROPE_BASE,
    GridMeta,
    apply_rope_angles,
    build_window_map,
    rope_angles,
    tile_heads,
    video_self_angles,
)
from .tensor import ContractError, DimensionError, Tensor

STREAMS = ("audio", "video")


@dataclass(frozen=True)
class StreamConfig:
    depth: int = 4
    dim: int = 32
    heads: int = 4
    ffn_mult: int = 2
    n_lct: int = 0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by {self.heads} heads")
        if (self.dim // self.heads) % 2:
            raise ContractError("head width must be even for rotary embeddings")


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description.

    ``audio.n_lct`` counts the video-context tokens read by audio queries
    (``n_v``); ``video.n_lct`` counts the audio-context tokens read by video
    queries (``n_a``).
    """

    audio: StreamConfig = field(default_factory=lambda: StreamConfig(dim=32, n_lct=128))
    video: StreamConfig = field(default_factory=lambda: StreamConfig(dim=64, n_lct=8))
    grid: GridMeta = field(default_factory=lambda: GridMeta(t_a=32, t_v=8, h=4, w=4))
    c_sig: int = 4
    n_classes: int = 4
    n_text_tokens: int = 4
    text_dim: int = 32
    t_embed_dim: int = 32
    variant: str = "ccl"
    full_span: bool = False
    rope_base: float = DEFAULT_ROPE_BASE
    dtype: str = "float32"

    def __post_init__(self):
        if self.audio.depth != self.video.depth:
            raise ContractError("audio and video streams must share the same depth")
        if self.variant not in ("ccl", "gated"):
            raise ContractError(f"unknown variant {self.variant!r}")

    def stream(self, name: str) -> StreamConfig:
        return self.audio if name == "audio" else self.video

    def to_dict(self) -> dict:
        return asdict(self)


def _other(stream: str) -> str:
    return "video" if stream == "audio" else "audio"


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order is the checkpoint order."""
    shapes: dict[str, tuple[int, ...]] = {"text_table": (cfg.n_classes + 1, cfg.n_text_tokens, cfg.text_dim)}
    for s in STREAMS:
        sc = cfg.stream(s)
        d = sc.dim
        d_other = cfg.stream(_other(s)).dim
        shapes[f"{s}.patch"] = (cfg.c_sig, d)
        shapes[f"{s}.t_mlp1"] = (cfg.t_embed_dim, d)
        shapes[f"{s}.t_mlp2"] = (d, d)
        for i in range(sc.depth):
            p = f"{s}.blocks.{i}"
            for sub in ("sa_norm", "ca_norm", "ffn_norm"):
                shapes[f"{p}.{sub}_w"] = (d,)
                shapes[f"{p}.{sub}_b"] = (d,)
            for w in ("sa_wq", "sa_wk", "sa_wv", "sa_wo"):
                shapes[f"{p}.{w}"] = (d, d)
            shapes[f"{p}.ca_wq"] = (d, d)
            shapes[f"{p}.ca_wk"] = (cfg.text_dim, d)
            shapes[f"{p}.ca_wv"] = (cfg.text_dim, d)
            shapes[f"{p}.ca_wo"] = (d, d)
            c = f"{p}.cca"
            shapes[f"{c}.norm_q_w"] = (d,)
            shapes[f"{c}.norm_q_b"] = (d,)
            shapes[f"{c}.norm_kv_w"] = (d_other,)
            shapes[f"{c}.norm_kv_b"] = (d_other,)
            shapes[f"{c}.wq"] = (d, d)
            shapes[f"{c}.wk"] = (d_other, d)
            shapes[f"{c}.wv"] = (d_other, d)
            shapes[f"{c}.wo"] = (d, d)
            if cfg.variant == "ccl" and sc.n_lct > 0:
                shapes[f"{c}.lct"] = (sc.n_lct, d)
                shapes[f"{c}.wk_lct"] = (d, d)
                shapes[f"{c}.wv_lct"] = (d, d)
            shapes[f"{p}.ffn_w1"] = (d, sc.ffn_mult * d)
            shapes[f"{p}.ffn_w2"] = (sc.ffn_mult * d, d)
        shapes[f"{s}.out_norm_w"] = (d,)
        shapes[f"{s}.out_norm_b"] = (d,)
        shapes[f"{s}.out"] = (d, cfg.c_sig)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count (documented in the README)."""
    lct = cfg.variant == "ccl"
    total = (cfg.n_classes + 1) * cfg.n_text_tokens * cfg.text_dim
    for s in STREAMS:
        sc = cfg.stream(s)
        d, do, e, L, m = sc.dim, cfg.stream(_other(s)).dim, cfg.text_dim, sc.depth, sc.ffn_mult
        n = sc.n_lct if lct else 0
        per_block = 8 * d + 2 * do + 4 * d * d + 2 * d * d + 2 * e * d + 2 * d * d + 2 * do * d + 2 * m * d * d
        if n:
            per_block += n * d + 2 * d * d
        total += cfg.c_sig * d + cfg.t_embed_dim * d + d * d + L * per_block + 2 * d + d * cfg.c_sig
    return total


def is_cross_modal_param(name: str) -> bool:
    """Cross-modal attention weights and context tokens (the high-rate group)."""
    return ".cca." in name


def _init_value(name: str, shape, seed: int, dtype, zero_cca_out: bool) -> np.ndarray:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("_w") and len(shape) == 1:
        return np.ones(shape, dtype=dtype)
    if leaf.endswith("_b") and len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    if leaf == "lct":
        return (rng.standard_normal(shape) * LCT_INIT_STD).astype(dtype)
    if leaf == "wo" and ".cca." in name and zero_cca_out:
        return np.zeros(shape, dtype=dtype)
    if name == "text_table":
        return rng.standard_normal(shape).astype(dtype)
    fan_in, fan_out = shape[0], shape[-1]
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int, zero_cca_out: bool = True) -> dict[str, Tensor]:
    """Deterministic parameters; each tensor draws from its own name-keyed stream.

    Because streams are keyed by name, variants that share a parameter name
    (CCL and gated) get bit-identical values for it under the same seed.
    """
    dtype = np.dtype(cfg.dtype)
    return {
        name: T.parameter(_init_value(name, shape, seed, dtype, zero_cca_out), name=name)
        for name, shape in param_shapes(cfg).items()
    }


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``1000 * t`` with shape ``(b, dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class DualStreamModel:
    """Parameters plus forward pass for the two-stream transformer."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0, zero_cca_out: bool = True):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, zero_cca_out)
        expected = param_shapes(cfg)
        if list(self.params) != list(expected):
            raise ContractError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {self.params[name].shape}")
        self.dtype = np.dtype(cfg.dtype)
        self.wmap = build_window_map(cfg.grid, full_span=cfg.full_span)
        self._blocks = {s: [self._view(f"{s}.blocks.{i}.") for i in range(cfg.stream(s).depth)] for s in STREAMS}
        self._cca = [
            CCAParams(
                a2v=self._view(f"video.blocks.{i}.cca."),
                v2a=self._view(f"audio.blocks.{i}.cca."),
                heads_a=cfg.audio.heads,
                heads_v=cfg.video.heads,
            )
            for i in range(cfg.audio.depth)
        ]
        g = cfg.grid
        self._self_angles = {
            "audio": tile_heads(rope_angles(np.arange(g.t_a), cfg.audio.dim // cfg.audio.heads, cfg.rope_base), cfg.audio.heads),
            "video": tile_heads(video_self_angles(g, cfg.video.dim // cfg.video.heads, cfg.rope_base), cfg.video.heads),
        }

    def _view(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def cca_params(self, block: int) -> CCAParams:
        return self._cca[block]

    def block_params(self, stream: str, block: int) -> dict[str, Tensor]:
        return self._blocks[stream][block]

    @property
    def depth(self) -> int:
        return self.cfg.audio.depth

    # stream pieces

    def _embed(self, stream: str, x: np.ndarray, t: np.ndarray) -> Tensor:
        p = self.params
        b = x.shape[0]
        tokens = T.tensor(x.reshape(b, -1, self.cfg.c_sig), dtype=self.dtype)
        h = tokens @ p[f"{stream}.patch"]
        feats = T.tensor(timestep_features(t, self.cfg.t_embed_dim), dtype=self.dtype)
        temb = T.silu(feats @ p[f"{stream}.t_mlp1"]) @ p[f"{stream}.t_mlp2"]
        return h + T.reshape(temb, (b, 1, temb.shape[-1]))

    def _text(self, text_ids: np.ndarray) -> Tensor:
        return T.take(self.params["text_table"], np.asarray(text_ids), axis=0)

    def _self_attn(self, stream: str, x: Tensor, bp: dict) -> Tensor:
        heads = self.cfg.stream(stream).heads
        ang = self._self_angles[stream]
        h = T.layer_norm(x, bp["sa_norm_w"], bp["sa_norm_b"])
        q = apply_rope_angles(h @ bp["sa_wq"], ang)
        k = apply_rope_angles(h @ bp["sa_wk"], ang)
        out, _ = scaled_attention(q, k, h @ bp["sa_wv"], heads)
        return out @ bp["sa_wo"]

    def _text_attn(self, stream: str, x: Tensor, text: Tensor, bp: dict) -> Tensor:
        h = T.layer_norm(x, bp["ca_norm_w"], bp["ca_norm_b"])
        out, _ = scaled_attention(h @ bp["ca_wq"], text @ bp["ca_wk"], text @ bp["ca_wv"], self.cfg.stream(stream).heads)
        return out @ bp["ca_wo"]

    def _ffn(self, x: Tensor, bp: dict) -> Tensor:
        h = T.layer_norm(x, bp["ffn_norm_w"], bp["ffn_norm_b"])
        return T.gelu(h @ bp["ffn_w1"]) @ bp["ffn_w2"]

    def transformer_block_forward(
        self,
        block: int,
        x_a: Tensor | None,
        x_v: Tensor | None,
        text: Tensor,
        plan: RoutingPlan,
        gates: Gates | None = None,
        attn_maps: dict | None = None,
    ) -> tuple[Tensor | None, Tensor | None]:
        """One block for both streams; cross-modal terms read the other stream's pre-update state."""
        xs = {"audio": x_a, "video": x_v}
        for s in STREAMS:
            if xs[s] is None:
                continue
            bp = self._blocks[s][block]
            xs[s] = xs[s] + self._self_attn(s, xs[s], bp)
            xs[s] = xs[s] + self._text_attn(s, xs[s], text, bp)
        d_a, d_v, maps = cca_block_forward(
            xs["audio"],
            xs["video"],
            self._cca[block],
            self.wmap,
            self.cfg.grid,
            plan,
            gates=gates,
            record=attn_maps is not None,
            rope_base=self.cfg.rope_base,
        )
        if attn_maps is not None:
            for direction, val in maps.items():
                attn_maps[(block, direction)] = val
        for s, delta in (("audio", d_a), ("video", d_v)):
            if xs[s] is None:
                continue
            if delta is not None:
                xs[s] = xs[s] + delta
            xs[s] = xs[s] + self._ffn(xs[s], self._blocks[s][block])
        return xs["audio"], xs["video"]

    def gates_for(self, plan: RoutingPlan) -> Gates | None:
        if self.cfg.variant != "gated":
            return None
        if plan.task is not None:
            return gated_baseline_plan(plan.task)
        return Gates(audio=int(plan.audio.use_cross_latent), video=int(plan.video.use_cross_latent))

    def forward(
        self,
        x_a: np.ndarray | None,
        x_v: np.ndarray | None,
        step_a,
        step_v,
        text_ids,
        plan: RoutingPlan,
        attn_maps: dict | None = None,
    ) -> tuple[Tensor | None, Tensor | None]:
        """Predicted velocities ``(v_audio, v_video)``; inactive streams give ``None``.

        ``x_a`` is ``(b, t_a, c_sig)`` and ``x_v`` is ``(b, t_v, h, w, c_sig)``;
        steps are scalars or per-sample arrays in ``[0, 1]``.
        """
        g = self.cfg.grid
        xs = {"audio": x_a, "video": x_v}
        shapes = {"audio": (g.t_a, self.cfg.c_sig), "video": (g.t_v, g.h, g.w, self.cfg.c_sig)}
        b = None
        for s in STREAMS:
            route = plan.stream(s)
            if route.active and xs[s] is None:
                raise ContractError(f"plan needs the {s} stream but no {s} input was given")
            if not route.active and xs[s] is not None:
                raise ContractError(f"plan disables the {s} stream but a {s} input was given")
            if xs[s] is not None:
                xs[s] = np.asarray(xs[s])
                if xs[s].shape[1:] != shapes[s]:
                    raise DimensionError(f"{s} input shape {xs[s].shape[1:]} != {shapes[s]}")
                if b is not None and xs[s].shape[0] != b:
                    raise DimensionError("audio and video batch sizes differ")
                b = xs[s].shape[0]
        steps = {
            "audio": np.broadcast_to(np.asarray(step_a, dtype=np.float64), (b,)),
            "video": np.broadcast_to(np.asarray(step_v, dtype=np.float64), (b,)),
        }
        if plan.shared_timestep and plan.audio.active and plan.video.active:
            if not np.array_equal(steps["audio"], steps["video"]):
                raise ContractError("this plan requires the two streams to share a timestep")
        for s in STREAMS:
            if plan.stream(s).is_reference and np.any(steps[s] != 0):
                raise ContractError(f"reference {s} stream must run at timestep 0")
        text = self._text(np.broadcast_to(np.asarray(text_ids), (b,)))
        hs = {s: self._embed(s, xs[s], steps[s]) if xs[s] is not None else None for s in STREAMS}
        gates = self.gates_for(plan)
        h_a, h_v = hs["audio"], hs["video"]
        for i in range(self.depth):
            h_a, h_v = self.transformer_block_forward(i, h_a, h_v, text, plan, gates, attn_maps)
        out = {}
        for s, h in (("audio", h_a), ("video", h_v)):
            if h is None:
                out[s] = None
                continue
            p = self.params
            y = T.layer_norm(h, p[f"{s}.out_norm_w"], p[f"{s}.out_norm_b"]) @ p[f"{s}.out"]
            out[s] = T.reshape(y, (b,) + shapes[s])
        return out["audio"], out["video"]

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def stream_parameters(self, stream: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(f"{stream}.")}
