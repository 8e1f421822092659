"""Which key/value sources each task exposes to each stream.

Runs one cross-modal block under every routing plan and reports how much
attention mass lands on the learnable context tokens.
"""

import numpy as np

from ccl_av.cca import cca_block_forward, lct_mass
from ccl_av.dcr import TaskKind, routing_plan
from ccl_av.model import DualStreamModel, ModelConfig, StreamConfig
from ccl_av.tarp import GridMeta
from ccl_av.tensor import Tensor

cfg = ModelConfig(
    audio=StreamConfig(depth=1, dim=16, heads=2, n_lct=6),
    video=StreamConfig(depth=1, dim=32, heads=2, n_lct=4),
    grid=GridMeta(t_a=8, t_v=4, h=2, w=2),
)
model = DualStreamModel(cfg, seed=0, zero_cca_out=False)
rng = np.random.default_rng(0)
x_a = Tensor(rng.standard_normal((1, 8, 16)).astype(np.float32))
x_v = Tensor(rng.standard_normal((1, 16, 32)).astype(np.float32))

for task in TaskKind:
    plan = routing_plan(task)
    print(f"{task.value:6s} audio {plan.audio}  video {plan.video}")
    d_a, d_v, maps = cca_block_forward(
        x_a if plan.audio.active else None,
        x_v if plan.video.active else None,
        model.cca_params(0),
        model.wmap,
        cfg.grid,
        plan,
        record=True,
    )
    for direction, (attn, n_lct) in sorted(maps.items()):
        print(f"    {direction}: mean context-token mass {lct_mass(attn, n_lct).mean():.3f} over {attn.shape[-1]} keys")
