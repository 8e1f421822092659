"""Sampling one untrained tiny model under every guidance mode.

The point is the bookkeeping: forwards per step, and that the two-pass rule
at s_m=1 reproduces plain conditional sampling bit for bit.
"""

import numpy as np

from ccl_av.guidance import FORWARDS_PER_STEP, GuidanceConfig, GuidanceMode, euler_sample
from ccl_av.model import DualStreamModel, ModelConfig, StreamConfig
from ccl_av.tarp import GridMeta


class Counting:
    def __init__(self, model):
        self.model, self.cfg, self.calls = model, model.cfg, 0

    def __call__(self, *args, **kw):
        self.calls += 1
        return self.model(*args, **kw)


cfg = ModelConfig(
    audio=StreamConfig(depth=1, dim=16, heads=2, n_lct=4),
    video=StreamConfig(depth=1, dim=32, heads=2, n_lct=2),
    grid=GridMeta(t_a=8, t_v=4, h=2, w=2),
)
model = DualStreamModel(cfg, seed=0, zero_cca_out=False)
for mode in GuidanceMode:
    m = Counting(model)
    a, v = euler_sample(m, [0, 1], GuidanceConfig(mode=mode, steps=10), seed=0)
    print(f"{mode.value:15s} forwards/step {m.calls // 10} (table {FORWARDS_PER_STEP[mode]})  |audio| {np.abs(a).mean():.4f}")

plain = euler_sample(model, [2], GuidanceConfig(mode="text_only", steps=10), seed=1)
ucg = euler_sample(model, [2], GuidanceConfig(mode="ucg2", s_m=1.0, steps=10), seed=1)
print("ucg2 at s_m=1 identical to conditional:", all(np.array_equal(x, y) for x, y in zip(plain, ucg)))
