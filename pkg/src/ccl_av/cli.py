"""Command-line entry points: train, sample, bench, dump-attn, eval-attn, eval-sync.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .dcr import TaskKind, routing_plan
from .guidance import GuidanceConfig, GuidanceMode, euler_sample
from .model import DualStreamModel
from .synthdata import blob_region, get_batch, sync_score
from .tensor import ContractError, DimensionError, NonFiniteError
from .trainer import Trainer, TrainingDiverged, flow_interpolate

log = logging.getLogger("ccl_av")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOG_FILE = "train_log.jsonl"
FINAL_CKPT = "checkpoint"
CURVE_START = 100


class UsageError(Exception):
    pass


def _ckpt_name(step: int) -> str:
    return f"ckpt_{step:06d}"


# ----------------------------------------------------------------------- train


def train_run(run_cfg: io.RunConfig, out_dir: str | Path, resume: str | Path | None = None, quiet: bool = False) -> Trainer:
    """Train up to ``run_cfg.train.steps`` total steps, checkpointing into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        steps = run_cfg.train.steps
        trainer, run_cfg = io.load_trainer(resume)
        run_cfg = dataclasses.replace(run_cfg, train=dataclasses.replace(run_cfg.train, steps=steps), out_dir=str(out))
        trainer.cfg = run_cfg.train
    else:
        model = DualStreamModel(run_cfg.model, seed=run_cfg.train.seed)
        trainer = Trainer(model, run_cfg.data, run_cfg.train)
    io.write_run_config(run_cfg, out)
    every = run_cfg.train.checkpoint_every

    def on_step(tr: Trainer, rec):
        if every and tr.step_count % every == 0:
            io.save_checkpoint(out / _ckpt_name(tr.step_count), tr.model, run_cfg, tr)
        if not quiet and (tr.step_count % 100 == 0 or tr.step_count == run_cfg.train.steps):
            log.info("step %d  task %s  loss %.4f  ema %s", rec.step, rec.task, rec.loss, rec.ema)

    remaining = max(0, run_cfg.train.steps - trainer.step_count)
    trainer.run(remaining, out / LOG_FILE, on_step)
    io.save_checkpoint(out / FINAL_CKPT, trainer.model, run_cfg, trainer)
    return trainer


def _apply_train_overrides(run_cfg: io.RunConfig, seed=None, steps=None, variant=None) -> io.RunConfig:
    train = run_cfg.train
    model = run_cfg.model
    if seed is not None:
        train = dataclasses.replace(train, seed=seed)
    if steps is not None:
        train = dataclasses.replace(train, steps=steps)
    if variant is not None:
        model = dataclasses.replace(model, variant=variant)
    return dataclasses.replace(run_cfg, train=train, model=model)


def cmd_train(args) -> int:
    run_cfg = io.load_run_config(args.config)
    run_cfg = _apply_train_overrides(run_cfg, args.seed, args.steps, args.variant)
    out = args.out or run_cfg.out_dir
    run_cfg = dataclasses.replace(run_cfg, out_dir=str(out))
    print(io.dump_run_config(run_cfg), end="")
    trainer = train_run(run_cfg, out, resume=args.resume)
    print(f"trained to step {trainer.step_count}; checkpoint at {Path(out) / FINAL_CKPT}")
    return EXIT_OK


# ---------------------------------------------------------------------- sample


def sample_run(model: DualStreamModel, gcfg: GuidanceConfig, class_id: int, n: int, seed: int, dump_attn: bool = False):
    """``n`` samples of one class; returns (audio, video, attention maps or None)."""
    if not 0 <= class_id < model.cfg.n_classes:
        raise UsageError(f"class must lie in [0, {model.cfg.n_classes})")
    maps = {} if dump_attn else None
    audio, video = euler_sample(model, np.full(n, class_id), gcfg, seed, attn_maps=maps)
    return audio, video, maps


def sample_sync_scores(audio: np.ndarray, video: np.ndarray, class_ids, grid) -> np.ndarray:
    return np.array([sync_score(a, v, blob_region(grid, int(c))) for a, v, c in zip(audio, video, class_ids)])


def write_attention_dir(directory: str | Path, maps: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for (block, direction), (attn, n_lct) in sorted(maps.items()):
        io.write_attention_map(d / io.attention_file_name(block, direction), block, direction, attn.data if hasattr(attn, "data") else attn, n_lct)


def cmd_sample(args) -> int:
    model, run_cfg = io.load_checkpoint(args.checkpoint)
    g = run_cfg.guidance
    try:
        mode = GuidanceMode.parse(args.mode) if args.mode is not None else g.mode
    except ValueError:
        raise UsageError(f"unknown guidance mode {args.mode!r}") from None
    gcfg = dataclasses.replace(
        g,
        mode=mode,
        s_text=g.s_text if args.s_text is None else args.s_text,
        s_m=g.s_m if args.s_m is None else args.s_m,
        steps=g.steps if args.steps is None else args.steps,
    )
    audio, video, maps = sample_run(model, gcfg, args.class_id, args.n, args.seed, args.dump_attn)
    grid = model.cfg.grid
    scores = sample_sync_scores(audio, video, [args.class_id] * args.n, grid)
    meta = {
        "mode": gcfg.mode.value,
        "s_text": gcfg.s_text,
        "s_m": gcfg.s_m,
        "steps": gcfg.steps,
        "seed": args.seed,
        "class_ids": [args.class_id] * args.n,
        "grid": dataclasses.asdict(grid),
        "checkpoint": str(args.checkpoint),
    }
    out = Path(args.out)
    io.save_samples(out, audio, video, meta)
    if maps is not None:
        write_attention_dir(out / "attn", maps)
    print(f"sync_score mean {scores.mean():.6f} over {len(scores)} samples")
    return EXIT_OK


# ------------------------------------------------------------------- attention


def dump_attention(model: DualStreamModel, spec, indices, t: float, seed: int):
    """Joint-task forward on noised dataset samples with attention recording."""
    batch = get_batch(spec, indices)
    rng = np.random.default_rng(seed)
    b = len(indices)
    eps_a = rng.standard_normal(batch.audio.shape).astype(batch.audio.dtype)
    eps_v = rng.standard_normal(batch.video.shape).astype(batch.video.dtype)
    tt = np.full(b, t)
    xa, _ = flow_interpolate(batch.audio, eps_a, tt)
    xv, _ = flow_interpolate(batch.video, eps_v, tt)
    maps: dict = {}
    model(xa, xv, tt, tt, batch.class_ids, routing_plan(TaskKind.JOINT_AV), attn_maps=maps)
    return batch, maps


def cmd_dump_attn(args) -> int:
    model, run_cfg = io.load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    indices = rng.choice(run_cfg.data.n_samples, size=args.n, replace=False)
    batch, maps = dump_attention(model, run_cfg.data, indices, args.t, args.seed)
    out = Path(args.out)
    meta = {"t": args.t, "seed": args.seed, "class_ids": batch.class_ids.tolist(), "indices": batch.indices.tolist(), "grid": dataclasses.asdict(model.cfg.grid)}
    io.save_samples(out / "samples", batch.audio, batch.video, meta, masks={"fg_audio": batch.fg_audio_mask, "fg_video": batch.fg_video_mask})
    write_attention_dir(out / "attn", maps)
    print(f"wrote {len(maps)} attention maps to {out / 'attn'}")
    return EXIT_OK


def lct_mass_report(attn_dir: str | Path, sample_dir: str | Path) -> dict:
    """Mean attention mass on context-token columns for foreground vs background queries.

    a2v queries are video tokens (masked by ``fg_video``); v2a queries are
    audio tokens (masked by ``fg_audio``).
    """
    arrays, _ = io.load_samples(sample_dir)
    masks = {"a2v": arrays.get("fg_video"), "v2a": arrays.get("fg_audio")}
    if masks["a2v"] is None or masks["v2a"] is None:
        raise UsageError("sample directory has no ground-truth masks")
    files = sorted(Path(attn_dir).glob("attn_b*_*.bin"))
    if not files:
        raise UsageError(f"no attention dumps in {attn_dir}")
    per_block: dict[str, list] = {d: [] for d in io.DIRECTIONS}
    for f in files:
        m = io.read_attention_map(f)
        attn, n_lct, direction = m["attn"], m["n_lct"], m["direction"]
        rows, q_len, _ = attn.shape
        mask = masks[direction].reshape(-1)
        if mask.size != rows * q_len:
            raise UsageError(f"{f.name}: mask size {mask.size} does not match {rows}x{q_len} queries")
        mask = mask.reshape(rows, q_len)
        mass = attn[..., attn.shape[-1] - n_lct :].astype(np.float64).sum(-1) if n_lct else np.zeros((rows, q_len))
        fg = float(mass[mask].mean()) if mask.any() else float("nan")
        bg = float(mass[~mask].mean()) if (~mask).any() else float("nan")
        per_block[direction].append({"block": m["block"], "fg": fg, "bg": bg, "n_lct": n_lct})
    report = {}
    for d, entries in per_block.items():
        if not entries:
            continue
        entries.sort(key=lambda e: e["block"])
        fg = float(np.mean([e["fg"] for e in entries]))
        bg = float(np.mean([e["bg"] for e in entries]))
        report[d] = {"fg": fg, "bg": bg, "bg_gt_fg": bool(bg > fg), "blocks": entries}
    return report


def cmd_eval_attn(args) -> int:
    report = lct_mass_report(args.attn_dir, args.sample_dir)
    for d, r in report.items():
        print(f"{d}: LCT mass fg {r['fg']:.6f} bg {r['bg']:.6f} bg>fg {r['bg_gt_fg']}")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval_sync(args) -> int:
    arrays, meta = io.load_samples(args.sample_dir)
    grid = io.GridMeta(**meta["grid"])
    scores = sample_sync_scores(arrays["audio"], arrays["video"], meta["class_ids"], grid)
    for i, s in enumerate(scores):
        print(f"sample {i}: {s:.6f}")
    print(f"mean {scores.mean():.6f}")
    return EXIT_OK


# ----------------------------------------------------------------------- bench


def _bench_worker(job: tuple) -> dict:
    raw_cfg, variant, seed, steps, out = job
    run_cfg = _apply_train_overrides(io.run_config_from_dict(raw_cfg), seed, steps, variant)
    run_cfg = dataclasses.replace(run_cfg, out_dir=str(out))
    train_run(run_cfg, out, quiet=True)
    records = [json.loads(line) for line in (Path(out) / LOG_FILE).read_text().splitlines()]
    curve = records[CURVE_START - 1 :]
    return {
        "variant": variant,
        "seed": seed,
        "steps": [r["step"] for r in curve],
        "ema": [r["ema"] for r in curve],
        "ema_audio": [r["ema_audio"] for r in curve],
        "ema_video": [r["ema_video"] for r in curve],
    }


def bench_run(run_cfg: io.RunConfig, seeds, steps: int, out_dir: str | Path, workers: int = 1) -> dict:
    """Paired ccl/gated training over ``seeds``; curves start at step 100."""
    if steps < CURVE_START:
        raise UsageError(f"bench needs at least {CURVE_START} steps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_run_config(run_cfg, out)
    raw = run_cfg.to_dict()
    jobs = [(raw, v, s, steps, str(out / f"{v}_s{s}")) for s in seeds for v in ("ccl", "gated")]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_worker, jobs))
    else:
        results = [_bench_worker(j) for j in jobs]
    runs = {f"{r['variant']}_s{r['seed']}": r for r in results}
    table = []
    for s in seeds:
        c, g = runs[f"ccl_s{s}"], runs[f"gated_s{s}"]
        table.append(
            {
                "seed": s,
                "ccl": c["ema"][-1],
                "gated": g["ema"][-1],
                "ccl_audio": c["ema_audio"][-1],
                "gated_audio": g["ema_audio"][-1],
                "ccl_video": c["ema_video"][-1],
                "gated_video": g["ema_video"][-1],
                "ccl_wins": bool(c["ema"][-1] <= g["ema"][-1]),
            }
        )
    report = {
        "steps": steps,
        "seeds": list(seeds),
        "win_rate": sum(r["ccl_wins"] for r in table) / len(table),
        "final": table,
        "curves": runs,
    }
    (out / "bench.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return report


def cmd_bench(args) -> int:
    run_cfg = io.load_run_config(args.config)
    out = args.out or str(Path(run_cfg.out_dir) / "bench")
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    report = bench_run(run_cfg, seeds, args.steps, out, args.workers)
    print("seed  ccl_ema   gated_ema  ccl<=gated  (joint task; audio/video parts in bench.json)")
    for r in report["final"]:
        print(f"{r['seed']:4d}  {r['ccl']:.5f}  {r['gated']:.5f}    {r['ccl_wins']}")
    print(f"win rate {report['win_rate']:.2f}")
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccl-av", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?", help="YAML run config (defaults when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--variant", choices=("ccl", "gated"))
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample with guidance from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--mode", help="text_only|none|ucg2|ucg3|mmcfg|synccfg_static")
    s.add_argument("--s-text", type=float)
    s.add_argument("--s-m", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--class", dest="class_id", type=int, default=0)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dump-attn", action="store_true")
    s.add_argument("--out", default="samples")
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("bench", help="paired ccl vs gated training")
    b.add_argument("config", nargs="?")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--seed0", type=int, default=0)
    b.add_argument("--steps", type=int, default=1500)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("dump-attn", help="record cross-modal attention on dataset samples")
    d.add_argument("checkpoint")
    d.add_argument("--n", type=int, default=16)
    d.add_argument("--t", type=float, default=0.5)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="attn_dump")
    d.set_defaults(func=cmd_dump_attn)

    e = sub.add_parser("eval-attn", help="foreground/background context-token mass")
    e.add_argument("attn_dir")
    e.add_argument("sample_dir")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval_attn)

    y = sub.add_parser("eval-sync", help="sync score of a sample dump")
    y.add_argument("sample_dir")
    y.set_defaults(func=cmd_eval_sync)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, io.ConfigError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
