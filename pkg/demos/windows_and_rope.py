"""Temporal alignment between a 16-token audio stream and 4 video frames.

Prints the audio window each frame reads, the frame each audio token reads,
and shows that fractional audio positions keep rotary logits relative.
"""

import numpy as np

from ccl_av.tarp import GridMeta, apply_rope, audio_rope_positions, build_window_map
from ccl_av.tensor import Tensor, precision

meta = GridMeta(t_a=16, t_v=4, h=2, w=2)
wm = build_window_map(meta)
print(f"tokens per frame c={wm.c}, window s={wm.s}, centers {wm.centers.tolist()}")
for i, row in enumerate(wm.audio_window_indices):
    print(f"  frame {i} reads audio {row.tolist()}")
print("audio token -> frame", wm.video_frame_of_audio.tolist())

pos = audio_rope_positions(meta)
print("audio positions on the frame clock", pos.tolist())

rng = np.random.default_rng(0)
q, k = rng.standard_normal((2, 1, 1, 8))
with precision(np.float64):
    for shift in (0.0, 3.5, -11.25):
        a = apply_rope(Tensor(q), [pos[5] + shift]).data
        b = apply_rope(Tensor(k), [pos[9] + shift]).data
        print(f"shift {shift:+6.2f}: logit {float((a * b).sum()):.12f}")
