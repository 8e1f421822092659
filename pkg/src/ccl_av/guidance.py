"""Guidance rules and the Euler flow sampler.

Every rule is an affine combination of model forwards. Combinations are
evaluated as ``sum_i c_i * v_i`` with coefficients that sum to one, so a scale
setting that selects a single branch returns that branch bit-exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dcr import RoutingPlan, TaskKind, context_only_plan, modality_drop_plan, routing_plan
from .tensor import ContractError, NonFiniteError


class GuidanceMode(str, enum.Enum):
    TEXT_ONLY = "text_only"
    UCG2 = "ucg2"
    UCG3 = "ucg3"
    MMCFG = "mmcfg"
    SYNCCFG_STATIC = "synccfg_static"

    @classmethod
    def parse(cls, value: str) -> GuidanceMode:
        aliases = {"none": cls.TEXT_ONLY, "synccfg": cls.SYNCCFG_STATIC}
        return aliases.get(value) or cls(value)


FORWARDS_PER_STEP = {
    GuidanceMode.TEXT_ONLY: 1,
    GuidanceMode.UCG2: 2,
    GuidanceMode.UCG3: 3,
    GuidanceMode.MMCFG: 3,
    GuidanceMode.SYNCCFG_STATIC: 3,
}


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance mode and scales; ``*_audio`` overrides apply to the audio stream only."""

    mode: GuidanceMode = GuidanceMode.UCG2
    s_text: float = 4.0
    s_m: float = 2.0
    steps: int = 50
    s_text_audio: float | None = None
    s_m_audio: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", GuidanceMode.parse(self.mode) if isinstance(self.mode, str) else self.mode)
        if self.steps < 1:
            raise ContractError("sampler needs at least one step")
        for v in (self.s_text, self.s_m, self.s_text_audio, self.s_m_audio):
            if v is not None and not np.isfinite(v):
                raise ContractError("guidance scales must be finite")

    def scales(self, stream: str) -> tuple[float, float]:
        if stream == "audio":
            s_text = self.s_text if self.s_text_audio is None else self.s_text_audio
            s_m = self.s_m if self.s_m_audio is None else self.s_m_audio
            return s_text, s_m
        return self.s_text, self.s_m


def _affine(coeffs, arrays) -> np.ndarray:
    out = coeffs[0] * arrays[0]
    for c, a in zip(coeffs[1:], arrays[1:]):
        out = out + c * a
    return out


def _forward(model, x_a, x_v, t, text, plan: RoutingPlan, attn_maps=None):
    b = x_a.shape[0]
    tt = np.full(b, t)
    v_a, v_v = model(x_a, x_v, tt, tt, text, plan, attn_maps=attn_maps)
    return np.asarray(v_a.data if hasattr(v_a, "data") else v_a), np.asarray(v_v.data if hasattr(v_v, "data") else v_v)


def null_text(model, b: int) -> np.ndarray:
    return np.full(b, model.cfg.n_classes, dtype=np.int64)


def joint_plan() -> RoutingPlan:
    return routing_plan(TaskKind.JOINT_AV)


def _combine_two(uncond, cond, cfg: GuidanceConfig):
    out = []
    for i, s in enumerate(("audio", "video")):
        _, s_m = cfg.scales(s)
        out.append(_affine((1.0 - s_m, s_m), (uncond[i], cond[i])))
    return tuple(out)


def _combine_three(uncond, text_branch, modal_branch, cfg: GuidanceConfig):
    out = []
    for i, s in enumerate(("audio", "video")):
        s_text, s_m = cfg.scales(s)
        out.append(_affine((1.0 - s_text - s_m, s_text, s_m), (uncond[i], text_branch[i], modal_branch[i])))
    return tuple(out)


def text_only(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    """Plain conditional velocity (no guidance)."""
    return _forward(model, x_a, x_v, t, cond, joint_plan(), attn_maps)


def ucg_two_pass(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    """``U + s_m (C - U)`` with ``U`` = null text and context-token-only cross attention."""
    uncond = _forward(model, x_a, x_v, t, null_text(model, len(cond)), context_only_plan())
    full = _forward(model, x_a, x_v, t, cond, joint_plan(), attn_maps)
    return _combine_two(uncond, full, cfg)


def ucg_three_pass(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    """Decoupled text and cross-modal scales around the context-token branch."""
    uc = null_text(model, len(cond))
    uncond = _forward(model, x_a, x_v, t, uc, context_only_plan())
    text_branch = _forward(model, x_a, x_v, t, cond, context_only_plan())
    modal_branch = _forward(model, x_a, x_v, t, uc, joint_plan(), attn_maps)
    return _combine_three(uncond, text_branch, modal_branch, cfg)


def mm_cfg_baseline(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    """Same shape as the three-pass rule but the unconditional branch drops the other modality."""
    uc = null_text(model, len(cond))
    uncond = _forward(model, x_a, x_v, t, uc, modality_drop_plan())
    text_branch = _forward(model, x_a, x_v, t, cond, modality_drop_plan())
    modal_branch = _forward(model, x_a, x_v, t, uc, joint_plan(), attn_maps)
    return _combine_three(uncond, text_branch, modal_branch, cfg)


def static_video(x_v: np.ndarray) -> np.ndarray:
    """Every frame replaced by frame 0."""
    return np.repeat(x_v[:, :1], x_v.shape[1], axis=1)


def silent_audio(x_a: np.ndarray) -> np.ndarray:
    return np.zeros_like(x_a)


def synccfg_static_baseline(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    """Unconditional branches see a handcrafted opposite modality (silent audio / static video).

    Each stream needs its own unconditional forward, hence one more pass than
    the two-pass context-token rule.
    """
    uc = null_text(model, len(cond))
    full = _forward(model, x_a, x_v, t, cond, joint_plan(), attn_maps)
    video_uncond = _forward(model, silent_audio(x_a), x_v, t, uc, joint_plan())[1]
    audio_uncond = _forward(model, x_a, static_video(x_v), t, uc, joint_plan())[0]
    return _combine_two((audio_uncond, video_uncond), full, cfg)


GUIDANCE_RULES = {
    GuidanceMode.TEXT_ONLY: text_only,
    GuidanceMode.UCG2: ucg_two_pass,
    GuidanceMode.UCG3: ucg_three_pass,
    GuidanceMode.MMCFG: mm_cfg_baseline,
    GuidanceMode.SYNCCFG_STATIC: synccfg_static_baseline,
}


def guided_velocity(model, x_a, x_v, t, cond, cfg: GuidanceConfig, attn_maps=None):
    return GUIDANCE_RULES[cfg.mode](model, x_a, x_v, t, cond, cfg, attn_maps)


def time_schedule(steps: int) -> np.ndarray:
    """Uniform grid from 1 down to 0 with exact endpoints."""
    ts = np.linspace(1.0, 0.0, steps + 1)
    ts[0], ts[-1] = 1.0, 0.0
    return ts


def euler_sample(model, cond, cfg: GuidanceConfig, seed: int, attn_maps: dict | None = None, record_step: int | None = None):
    """Integrate the guided flow from Gaussian noise at t=1 to data at t=0.

    ``cond`` holds one class id per sample. When ``attn_maps`` is given the
    cross-modal attention of the conditional branch at ``record_step``
    (default: the last step) is stored in it.
    """
    cond = np.asarray(cond, dtype=np.int64)
    g = model.cfg.grid
    c = model.cfg.c_sig
    dtype = np.dtype(getattr(model.cfg, "dtype", "float32"))
    rng = np.random.default_rng(seed)
    b = len(cond)
    x_a = rng.standard_normal((b, g.t_a, c)).astype(dtype)
    x_v = rng.standard_normal((b, g.t_v, g.h, g.w, c)).astype(dtype)
    ts = time_schedule(cfg.steps)
    rec = cfg.steps - 1 if record_step is None else record_step
    for k in range(cfg.steps):
        dt = ts[k] - ts[k + 1]
        maps = attn_maps if (attn_maps is not None and k == rec) else None
        v_a, v_v = guided_velocity(model, x_a, x_v, ts[k], cond, cfg, maps)
        x_a = (x_a - dt * v_a).astype(dtype)
        x_v = (x_v - dt * v_v).astype(dtype)
        if not (np.isfinite(x_a).all() and np.isfinite(x_v).all()):
            raise NonFiniteError(f"sampler state became non-finite at step {k}")
    return x_a, x_v
