"""Per-task routing of cross-modal keys and values, plus the binary-gate baseline."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .tensor import ContractError


class TaskKind(str, enum.Enum):
    TEXT_TO_VIDEO = "t2v"
    TEXT_TO_AUDIO = "t2a"
    AUDIO_TO_VIDEO = "a2v"
    VIDEO_TO_AUDIO = "v2a"
    JOINT_AV = "joint"


@dataclass(frozen=True)
class StreamRoute:
    """What one stream's cross-modal attention sees during a task.

    ``use_cross_latent`` admits the other stream's latent tokens as keys and
    values; ``use_lct`` admits this stream's learnable context tokens. A
    reference stream runs at timestep 0, is detached where the other stream
    reads it, and contributes no loss.
    """

    active: bool
    use_cross_latent: bool
    use_lct: bool
    is_reference: bool = False
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.is_reference and self.loss_weight != 0:
            raise ContractError("a reference stream must have zero loss weight")
        if not self.active and (self.use_cross_latent or self.is_reference or self.loss_weight):
            raise ContractError("an inactive stream cannot route or carry loss")


@dataclass(frozen=True)
class RoutingPlan:
    task: TaskKind | None
    audio: StreamRoute
    video: StreamRoute
    shared_timestep: bool = False

    def __post_init__(self):
        if self.audio.is_reference and not self.video.use_cross_latent and self.video.active:
            # a reference stream only exists to feed the other one
            raise ContractError("reference audio must feed video cross-attention")
        if self.audio.use_cross_latent and not self.video.active:
            raise ContractError("audio cannot attend to an inactive video stream")
        if self.video.use_cross_latent and not self.audio.active:
            raise ContractError("video cannot attend to an inactive audio stream")

    def stream(self, name: str) -> StreamRoute:
        return self.audio if name == "audio" else self.video


_OFF = StreamRoute(active=False, use_cross_latent=False, use_lct=False, loss_weight=0.0)
_LCT_ONLY = StreamRoute(active=True, use_cross_latent=False, use_lct=True)
_FULL = StreamRoute(active=True, use_cross_latent=True, use_lct=True)
_REFERENCE = StreamRoute(active=True, use_cross_latent=False, use_lct=True, is_reference=True, loss_weight=0.0)


def routing_plan(task: TaskKind) -> RoutingPlan:
    task = TaskKind(task)
    if task is TaskKind.TEXT_TO_VIDEO:
        return RoutingPlan(task, audio=_OFF, video=_LCT_ONLY)
    if task is TaskKind.TEXT_TO_AUDIO:
        return RoutingPlan(task, audio=_LCT_ONLY, video=_OFF)
    if task is TaskKind.AUDIO_TO_VIDEO:
        return RoutingPlan(task, audio=_REFERENCE, video=_FULL)
    if task is TaskKind.VIDEO_TO_AUDIO:
        return RoutingPlan(task, audio=_FULL, video=_REFERENCE)
    return RoutingPlan(task, audio=_FULL, video=_FULL, shared_timestep=True)


def context_only_plan() -> RoutingPlan:
    """Both streams run, each attending only to its learnable context tokens.

    This is the unconditional cross-modal branch used at inference; it is the
    two single-modality training routes executed side by side.
    """
    return RoutingPlan(None, audio=_LCT_ONLY, video=_LCT_ONLY, shared_timestep=True)


def modality_drop_plan() -> RoutingPlan:
    """Both streams run with cross-modal attention removed entirely."""
    off = StreamRoute(active=True, use_cross_latent=False, use_lct=False)
    return RoutingPlan(None, audio=off, video=off, shared_timestep=True)


@dataclass(frozen=True)
class Gates:
    audio: int
    video: int

    def stream(self, name: str) -> int:
        return self.audio if name == "audio" else self.video


def gated_baseline_plan(task: TaskKind) -> Gates:
    """Binary gate per stream: 1 when the stream reads the other modality."""
    task = TaskKind(task)
    if task is TaskKind.JOINT_AV:
        return Gates(audio=1, video=1)
    if task is TaskKind.AUDIO_TO_VIDEO:
        return Gates(audio=0, video=1)
    if task is TaskKind.VIDEO_TO_AUDIO:
        return Gates(audio=1, video=0)
    return Gates(audio=0, video=0)
