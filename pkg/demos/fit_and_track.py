"""Fit a translating synthetic video, then track a few points through it.

Run with ``python3 demos/fit_and_track.py [steps]``. Writes the canonical
image and a reconstruction of the last frame to ``demo_out/``.
"""

import sys
from pathlib import Path

import numpy as np

from codef import synth
from codef.images import save_png
from codef.toolkit import psnr, reconstruct, render_canonical, track_keypoints
from codef.trainer import TrainConfig, fit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = Path("demo_out")
out.mkdir(exist_ok=True)

video = synth.generate(synth.translation_spec())
print(f"video {video.frames.shape}, fitting {steps} steps")

# keep the coarse-to-fine window inside the run
config = TrainConfig(total_steps=steps, n_beg=int(0.4 * steps), n_step=int(0.4 * steps))
result = fit(video.frames, video.fwd, video.bwd, config)
ckpt = result.checkpoint
print(f"final loss {result.log[-1, 1]:.2e}")

recon = reconstruct(ckpt)
print(f"reconstruction psnr {psnr(recon, video.frames):.2f} dB")
save_png(out / "canonical.png", render_canonical(ckpt).image)
save_png(out / "recon_last.png", recon[-1])

# points picked in frame 0 and compared with where the content really goes
rng = np.random.default_rng(1)
n, h, w = ckpt.video_shape
queries = rng.uniform([20, 20], [w - 40, h - 20], size=(5, 2))
for tp in track_keypoints(ckpt, 0, queries):
    truth = video.warp_oracle(np.asarray(tp.query_px), 0, n - 1)
    err = np.linalg.norm(tp.positions[-1] - truth)
    print(f"point {np.round(tp.query_px, 1)} -> {np.round(tp.positions[-1], 2)} (error {err:.3f} px)")
