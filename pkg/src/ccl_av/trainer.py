"""Flow-matching multi-task training."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dcr import RoutingPlan, TaskKind, routing_plan
from .model import DualStreamModel, is_cross_modal_param
from .synthdata import DatasetSpec, get_batch
from .tensor import ContractError, NonFiniteError, Tensor

log = logging.getLogger(__name__)

TASK_ORDER = (
    TaskKind.TEXT_TO_VIDEO,
    TaskKind.TEXT_TO_AUDIO,
    TaskKind.AUDIO_TO_VIDEO,
    TaskKind.VIDEO_TO_AUDIO,
    TaskKind.JOINT_AV,
)

# 0.1 for text-to-single-modality, split evenly between the two streams
DEFAULT_TASK_PROBS = {"t2v": 0.05, "t2a": 0.05, "a2v": 0.15, "v2a": 0.15, "joint": 0.6}


@dataclass
class TrainConfig:
    task_probs: dict = field(default_factory=lambda: dict(DEFAULT_TASK_PROBS))
    lr_cca: float = 2e-3
    lr_base: float = 1e-3
    steps: int = 1500
    batch: int = 8
    ema_decay: float = 0.99
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    checkpoint_every: int = 500

    def __post_init__(self):
        self.betas = tuple(self.betas)
        validate_probs(self.task_probs)


@dataclass
class TrainRecord:
    step: int
    task: str
    loss: float
    loss_audio: float | None
    loss_video: float | None
    ema: float | None
    ema_audio: float | None
    ema_video: float | None
    status: str = "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: TrainRecord):
        super().__init__(f"non-finite loss at step {record.step} ({record.task})")
        self.record = record


def validate_probs(probs: dict) -> dict:
    unknown = set(probs) - {k.value for k in TASK_ORDER}
    if unknown:
        raise ContractError(f"unknown tasks in probabilities: {sorted(unknown)}")
    vals = np.array([probs.get(k.value, 0.0) for k in TASK_ORDER], dtype=np.float64)
    if (vals < 0).any() or not np.isclose(vals.sum(), 1.0, atol=1e-9):
        raise ContractError(f"task probabilities must be non-negative and sum to 1, got {probs}")
    return probs


def sample_task(probs: dict, rng: np.random.Generator) -> TaskKind:
    """One categorical draw; consumes exactly one uniform from ``rng``."""
    vals = np.array([probs.get(k.value, 0.0) for k in TASK_ORDER], dtype=np.float64)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(vals), u * vals.sum(), side="right"))
    idx = min(idx, len(TASK_ORDER) - 1)
    while vals[idx] == 0:  # guard against rounding at the top edge
        idx -= 1
    return TASK_ORDER[idx]


def flow_interpolate(x0: np.ndarray, eps: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Straight path ``x_t = (1 - t) x0 + t eps`` and its velocity ``eps - x0``.

    ``t`` is a scalar or a per-sample vector broadcast over trailing axes.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"data and noise shapes differ: {x0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ContractError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    x_t = ((1.0 - t) * x0 + t * eps).astype(x0.dtype)
    return x_t, (eps - x0).astype(x0.dtype)


def multitask_loss(preds, targets, plan: RoutingPlan) -> tuple[Tensor, dict]:
    """Weighted sum of per-stream velocity MSEs; zero-weight streams are left out entirely.

    ``preds`` and ``targets`` are ``(audio, video)`` pairs. Returns the loss and
    the per-stream loss values (``None`` when not computed).
    """
    parts: dict[str, float | None] = {"audio": None, "video": None}
    total = None
    for i, s in enumerate(("audio", "video")):
        route = plan.stream(s)
        if not route.active or route.loss_weight == 0:
            continue
        if preds[i] is None:
            raise ContractError(f"plan trains the {s} stream but no {s} prediction was given")
        term = T.mse(preds[i], targets[i])
        parts[s] = term.item()
        if route.loss_weight != 1:
            term = term * route.loss_weight
        total = term if total is None else total + term
    if total is None:
        raise ContractError("plan has no loss-bearing stream")
    return total, parts


class Adam:
    """Adam with per-parameter learning rates from two groups.

    Cross-modal attention weights and context tokens use ``lr_cca``; all other
    parameters use ``lr_base``.
    """

    def __init__(self, params: dict[str, Tensor], lr_cca: float, lr_base: float, betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.lr = {name: (lr_cca if is_cross_modal_param(name) else lr_base) for name in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def groups(self) -> dict[str, list[str]]:
        cca = [n for n in self.params if is_cross_modal_param(n)]
        return {"cca": cca, "base": [n for n in self.params if not is_cross_modal_param(n)]}

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            lr = self.lr[name]
            if lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for n in self.params:
            self.m[n][...] = arrays[f"m.{n}"]
            self.v[n][...] = arrays[f"v.{n}"]
        self.t = t


class BatchStream:
    """Endless batches over reshuffled passes of the dataset indices.

    Shuffling draws from the shared trainer generator, so the data order is a
    function of the seed and step count only. State is resumable.
    """

    def __init__(self, spec: DatasetSpec, batch: int, rng: np.random.Generator):
        self.spec = spec
        self.batch = batch
        self.rng = rng
        self.order: np.ndarray | None = None
        self.pos = 0

    def __iter__(self):
        return self

    def next_indices(self) -> np.ndarray:
        idx: list[int] = []
        while len(idx) < self.batch:
            if self.order is None or self.pos == len(self.order):
                self.order = self.rng.permutation(self.spec.n_samples)
                self.pos = 0
            take = min(self.batch - len(idx), len(self.order) - self.pos)
            idx.extend(int(i) for i in self.order[self.pos : self.pos + take])
            self.pos += take
        return np.array(idx, dtype=np.int64)

    def __next__(self):
        return get_batch(self.spec, self.next_indices())

    def state(self) -> dict:
        return {"order": None if self.order is None else self.order.tolist(), "pos": self.pos}

    def load_state(self, state: dict) -> None:
        self.order = None if state["order"] is None else np.array(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])


def draw_timesteps(plan: RoutingPlan, rng: np.random.Generator, b: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform timesteps per stream, shared when the plan says so, 0 for references.

    Two vectors are always drawn so the generator advances identically for
    every task.
    """
    t_v = rng.random(b)
    t_a = rng.random(b)
    if plan.shared_timestep:
        t_a = t_v.copy()
    if plan.audio.is_reference:
        t_a = np.zeros(b)
    if plan.video.is_reference:
        t_v = np.zeros(b)
    return t_a, t_v


class Trainer:
    """Owns a model, its optimizer and the training random stream."""

    def __init__(self, model: DualStreamModel, spec: DatasetSpec, cfg: TrainConfig):
        self.model = model
        self.spec = spec
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.stream = BatchStream(spec, cfg.batch, self.rng)
        self.opt = Adam(model.params, cfg.lr_cca, cfg.lr_base, cfg.betas, cfg.eps)
        self.step_count = 0
        self.ema: dict[str, float | None] = {"total": None, "audio": None, "video": None}

    def _ema_update(self, key: str, value: float | None) -> float | None:
        if value is None:
            return self.ema[key]
        prev = self.ema[key]
        d = self.cfg.ema_decay
        self.ema[key] = value if prev is None else d * prev + (1.0 - d) * value
        return self.ema[key]

    def train_step(self) -> TrainRecord:
        step = self.step_count + 1
        task = sample_task(self.cfg.task_probs, self.rng)
        plan = routing_plan(task)
        batch = next(self.stream)
        b = self.cfg.batch
        t_a, t_v = draw_timesteps(plan, self.rng, b)
        eps_a = self.rng.standard_normal(batch.audio.shape).astype(batch.audio.dtype)
        eps_v = self.rng.standard_normal(batch.video.shape).astype(batch.video.dtype)
        xa_t, va = flow_interpolate(batch.audio, eps_a, t_a)
        xv_t, vv = flow_interpolate(batch.video, eps_v, t_v)
        try:
            with T.GradTape() as tape:
                pred = self.model(
                    xa_t if plan.audio.active else None,
                    xv_t if plan.video.active else None,
                    t_a,
                    t_v,
                    batch.class_ids,
                    plan,
                )
                loss, parts = multitask_loss(pred, (va, vv), plan)
            grads = tape.backward(loss)
        except NonFiniteError:
            rec = TrainRecord(step, task.value, float("nan"), None, None, self.ema["total"], None, None, status="nonfinite")
            raise TrainingDiverged(rec) from None
        self.opt.step(grads)
        self.step_count = step
        if task is TaskKind.JOINT_AV:
            ema = self._ema_update("total", loss.item())
            ema_a = self._ema_update("audio", parts["audio"])
            ema_v = self._ema_update("video", parts["video"])
        else:
            ema, ema_a, ema_v = self.ema["total"], self.ema["audio"], self.ema["video"]
        return TrainRecord(step, task.value, loss.item(), parts["audio"], parts["video"], ema, ema_a, ema_v)

    def run(self, n_steps: int, log_path: str | Path | None = None, on_step: Callable | None = None) -> list[TrainRecord]:
        records = []
        fh = open(log_path, "a") if log_path is not None else None
        try:
            for _ in range(n_steps):
                try:
                    rec = self.train_step()
                except TrainingDiverged as exc:
                    if fh:
                        fh.write(exc.record.to_json() + "\n")
                    raise
                records.append(rec)
                if fh:
                    fh.write(rec.to_json() + "\n")
                if on_step is not None:
                    on_step(self, rec)
        finally:
            if fh:
                fh.close()
        return records

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "ema": dict(self.ema),
            "rng": self.rng.bit_generator.state,
            "stream": self.stream.state(),
            "adam_t": self.opt.t,
        }

    def load_state(self, state: dict, optimizer_arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        self.ema = dict(state["ema"])
        self.rng.bit_generator.state = state["rng"]
        self.stream.load_state(state["stream"])
        self.opt.load_state_arrays(optimizer_arrays, int(state["adam_t"]))


def train_loop(model: DualStreamModel, spec: DatasetSpec, cfg: TrainConfig, log_path=None) -> tuple[list[TrainRecord], dict]:
    """Train for ``cfg.steps`` steps; returns the records and the final parameters."""
    trainer = Trainer(model, spec, cfg)
    records = trainer.run(cfg.steps, log_path)
    return records, model.params
