"""Short paired training run, then a look at where background tokens attend.

A few hundred steps on a reduced grid so it finishes in about a minute.
The full-size comparison is ``ccl-av bench``.
"""

import tempfile
from pathlib import Path

import numpy as np

from ccl_av.cli import dump_attention, lct_mass_report, train_run, write_attention_dir
from ccl_av.io import RunConfig, save_samples
from ccl_av.model import ModelConfig, StreamConfig
from ccl_av.tarp import GridMeta
from ccl_av.trainer import TrainConfig

STEPS = 300
model_cfg = ModelConfig(
    audio=StreamConfig(depth=2, dim=16, heads=2, n_lct=16),
    video=StreamConfig(depth=2, dim=32, heads=2, n_lct=4),
    grid=GridMeta(t_a=16, t_v=4, h=4, w=4),
)
work = Path(tempfile.mkdtemp(prefix="ccl_av_demo_"))
for variant in ("ccl", "gated"):
    cfg = RunConfig(model=ModelConfig(**{**model_cfg.__dict__, "variant": variant}), train=TrainConfig(steps=STEPS, checkpoint_every=0))
    tr = train_run(cfg, work / variant, quiet=True)
    print(f"{variant:5s} joint EMA loss after {STEPS} steps: {tr.ema['total']:.4f}")

    if variant == "ccl":
        batch, maps = dump_attention(tr.model, cfg.data, np.arange(8), 0.5, seed=0)
        save_samples(work / "samples", batch.audio, batch.video, {}, masks={"fg_audio": batch.fg_audio_mask, "fg_video": batch.fg_video_mask})
        write_attention_dir(work / "attn", maps)
        for d, r in lct_mass_report(work / "attn", work / "samples").items():
            print(f"  {d}: context-token mass background {r['bg']:.3f} foreground {r['fg']:.3f}")
print("outputs in", work)
