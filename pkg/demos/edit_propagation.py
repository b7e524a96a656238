"""Paint on the canonical image of a wavy video and watch the paint follow the motion.

Run with ``python3 demos/edit_propagation.py [steps]``. The fit takes a few
minutes on one core; frames with the paint land in ``demo_out/edit/``.
"""

import sys
from pathlib import Path

from codef import synth
from codef.images import save_png
from codef.toolkit import propagate_edit, render_canonical
from codef.trainer import TrainConfig, fit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
out = Path("demo_out") / "edit"
out.mkdir(parents=True, exist_ok=True)

video = synth.generate(synth.sinusoidal_spec())
config = TrainConfig(total_steps=steps, n_beg=int(0.4 * steps), n_step=int(0.4 * steps))
ckpt = fit(video.frames, video.fwd, video.bwd, config).checkpoint

raster = render_canonical(ckpt)
edited = raster.image.copy()
h, w = edited.shape[:2]
# a green bar across the middle of the canonical image
edited[h // 2 - 4:h // 2 + 4, w // 4:3 * w // 4] = (0.1, 0.8, 0.2)
save_png(out / "canonical_edited.png", edited)

frames = propagate_edit(ckpt, edited, mode="residual")
for t, frame in enumerate(frames):
    save_png(out / f"frame_{t:05d}.png", frame)
print(f"wrote {len(frames)} edited frames to {out}")
