"""Run configs, checkpoints, sample dumps and attention dumps.

All binary payloads are little-endian and row-major. Layouts are listed in the
README.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .guidance import GuidanceConfig, GuidanceMode
from .model import DualStreamModel, ModelConfig, StreamConfig, param_shapes
from .synthdata import DatasetSpec
from .tarp import GridMeta
from .tensor import ContractError, Tensor
from .trainer import Trainer, TrainConfig

CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
PARAMS_BLOB = "params.bin"
OPTIM_BLOB = "optimizer.bin"
TRAINER_STATE = "trainer_state.json"
CONFIG_FILE = "config.yaml"

ATTN_MAGIC = b"CCLATTN1"
ATTN_HEADER = struct.Struct("<8s6i")
DIRECTIONS = ("a2v", "v2a")


class ConfigError(ValueError):
    pass


class IntegrityError(IOError):
    pass


# --------------------------------------------------------------------- config


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        # the dataset always follows the model's grid and channel count
        if self.data.grid != self.model.grid or self.data.c_sig != self.model.c_sig:
            self.data = dataclasses.replace(self.data, grid=self.model.grid, c_sig=self.model.c_sig)
        if self.data.n_classes != self.model.n_classes:
            raise ConfigError(f"data.n_classes {self.data.n_classes} != model.n_classes {self.model.n_classes}")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self.data)
        del data["grid"], data["c_sig"]
        train = dataclasses.asdict(self.train)
        train["betas"] = list(train["betas"])
        guidance = dataclasses.asdict(self.guidance)
        guidance["mode"] = self.guidance.mode.value
        return {
            "model": dataclasses.asdict(self.model),
            "data": data,
            "train": train,
            "guidance": guidance,
            "out_dir": self.out_dir,
        }


def _build(cls, values, where: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def run_config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - {"model", "data", "train", "guidance", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    m = dict(raw.get("model") or {})
    if not isinstance(m, dict):
        raise ConfigError("model: expected a mapping")
    for s in ("audio", "video"):
        if s in m:
            m[s] = _build(StreamConfig, m[s], f"model.{s}")
    if "grid" in m:
        m["grid"] = _build(GridMeta, m["grid"], "model.grid")
    model = _build(ModelConfig, m, "model")
    data = raw.get("data") or {}
    if isinstance(data, dict) and ({"grid", "c_sig"} & set(data)):
        raise ConfigError("data: grid and c_sig come from the model section")
    data = _build(DatasetSpec, {**data, "grid": model.grid, "c_sig": model.c_sig}, "data")
    train = _build(TrainConfig, raw.get("train"), "train")
    guid = dict(raw.get("guidance") or {})
    if "mode" in guid:
        try:
            guid["mode"] = GuidanceMode.parse(str(guid["mode"]))
        except ValueError:
            raise ConfigError(f"guidance: unknown mode {guid['mode']!r}") from None
    guidance = _build(GuidanceConfig, guid, "guidance")
    out_dir = raw.get("out_dir", "runs/default")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    return RunConfig(model=model, data=data, train=train, guidance=guidance, out_dir=out_dir)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return run_config_from_dict(raw)


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def write_run_config(cfg: RunConfig, directory: str | Path) -> Path:
    path = Path(directory) / CONFIG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_run_config(cfg))
    return path


# ----------------------------------------------------------------- checkpoints


def _write_arrays(arrays: dict[str, np.ndarray], blob_path: Path, dtype: str) -> list[dict]:
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    return entries


def _read_arrays(entries: list[dict], blob_path: Path, dtype: str) -> dict[str, np.ndarray]:
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read {blob_path.name}: {exc}") from None
    dt = np.dtype(dtype)
    expected = sum(e["nbytes"] for e in entries)
    if len(blob) != expected:
        raise IntegrityError(f"{blob_path.name} holds {len(blob)} bytes, manifest expects {expected}")
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if n != e["nbytes"] or e["offset"] + n > len(blob):
            raise IntegrityError(f"entry {e['name']} is inconsistent with its shape")
        out[e["name"]] = np.frombuffer(blob, dtype=dt, count=n // dt.itemsize, offset=e["offset"]).reshape(e["shape"]).copy()
    return out


def _blob_dtype(model_dtype: str) -> str:
    return {"float32": "<f4", "float64": "<f8"}[model_dtype]


def save_checkpoint(directory: str | Path, model: DualStreamModel, run_cfg: RunConfig | None = None, trainer: Trainer | None = None) -> Path:
    """Write parameters (and optionally optimizer/trainer state) to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dtype = _blob_dtype(model.cfg.dtype)
    params = {n: p.data for n, p in model.params.items()}
    manifest = {
        "format": "ccl_av.checkpoint",
        "version": CHECKPOINT_VERSION,
        "dtype": dtype,
        "params": _write_arrays(params, d / PARAMS_BLOB, dtype),
    }
    if trainer is not None:
        manifest["optimizer"] = _write_arrays(trainer.opt.state_arrays(), d / OPTIM_BLOB, dtype)
        (d / TRAINER_STATE).write_text(json.dumps(trainer.state(), sort_keys=True))
    if run_cfg is None:
        run_cfg = RunConfig(model=model.cfg)
    write_run_config(run_cfg, d)
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise IntegrityError(f"cannot read manifest: {exc}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"malformed manifest: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(directory: str | Path) -> tuple[DualStreamModel, RunConfig]:
    """Rebuild the model stored in ``directory``; shapes are checked against its config."""
    d = Path(directory)
    manifest = read_manifest(d)
    run_cfg = load_run_config(d / CONFIG_FILE)
    shapes = param_shapes(run_cfg.model)
    entries = manifest["params"]
    if [e["name"] for e in entries] != list(shapes):
        raise IntegrityError("manifest parameter names do not match the stored config")
    for e in entries:
        if tuple(e["shape"]) != tuple(shapes[e["name"]]):
            raise IntegrityError(f"shape of {e['name']} {e['shape']} != config {shapes[e['name']]}")
    if manifest["dtype"] != _blob_dtype(run_cfg.model.dtype):
        raise IntegrityError("blob dtype does not match the configured model dtype")
    arrays = _read_arrays(entries, d / PARAMS_BLOB, manifest["dtype"])
    params = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
    model = DualStreamModel(run_cfg.model, params=params)
    return model, run_cfg


def load_trainer(directory: str | Path) -> tuple[Trainer, RunConfig]:
    """Model, optimizer and random stream restored for a bit-exact resume."""
    d = Path(directory)
    model, run_cfg = load_checkpoint(d)
    manifest = read_manifest(d)
    if "optimizer" not in manifest:
        raise IntegrityError("checkpoint carries no optimizer state")
    trainer = Trainer(model, run_cfg.data, run_cfg.train)
    opt = _read_arrays(manifest["optimizer"], d / OPTIM_BLOB, manifest["dtype"])
    try:
        state = json.loads((d / TRAINER_STATE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"bad trainer state: {exc}") from None
    trainer.load_state(state, opt)
    return trainer, run_cfg


# ---------------------------------------------------------------- sample dumps


def save_samples(directory: str | Path, audio: np.ndarray, video: np.ndarray, meta: dict, masks: dict | None = None) -> Path:
    """``audio.f32`` / ``video.f32`` raw arrays plus ``meta.json``; masks go to ``*.u8``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"audio": np.asarray(audio, dtype="<f4"), "video": np.asarray(video, dtype="<f4")}
    info = {"version": 1, "dtype": "<f4", "arrays": {}, **meta}
    for name, arr in arrays.items():
        (d / f"{name}.f32").write_bytes(np.ascontiguousarray(arr).tobytes())
        info["arrays"][name] = list(arr.shape)
    if masks:
        info["masks"] = {}
        for name, m in masks.items():
            m = np.asarray(m, dtype=np.uint8)
            (d / f"{name}.u8").write_bytes(np.ascontiguousarray(m).tobytes())
            info["masks"][name] = list(m.shape)
    (d / "meta.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return d


def load_samples(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    info = json.loads((d / "meta.json").read_text())
    out = {}
    for name, shape in info["arrays"].items():
        out[name] = np.fromfile(d / f"{name}.f32", dtype="<f4").reshape(shape)
    for name, shape in info.get("masks", {}).items():
        out[name] = np.fromfile(d / f"{name}.u8", dtype=np.uint8).reshape(shape).astype(bool)
    return out, info


# ------------------------------------------------------------- attention dumps


def write_attention_map(path: str | Path, block: int, direction: str, attn: np.ndarray, n_lct: int) -> None:
    """One map ``(rows, q_len, kv_len)``; LCT columns are the trailing ``n_lct``."""
    attn = np.asarray(attn, dtype="<f4")
    if attn.ndim != 3:
        raise ContractError(f"attention map must be (rows, q_len, kv_len), got {attn.shape}")
    rows, q_len, kv_len = attn.shape
    header = ATTN_HEADER.pack(ATTN_MAGIC, block, DIRECTIONS.index(direction), rows, q_len, kv_len, n_lct)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(attn).tobytes())


def read_attention_map(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < ATTN_HEADER.size:
        raise IntegrityError(f"{path}: too short for an attention header")
    magic, block, direction, rows, q_len, kv_len, n_lct = ATTN_HEADER.unpack_from(raw)
    if magic != ATTN_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    n = rows * q_len * kv_len
    if len(raw) != ATTN_HEADER.size + 4 * n:
        raise IntegrityError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f4", offset=ATTN_HEADER.size).reshape(rows, q_len, kv_len)
    return {"block": block, "direction": DIRECTIONS[direction], "n_lct": n_lct, "attn": data}


def attention_file_name(block: int, direction: str) -> str:
    return f"attn_b{block}_{direction}.bin"
