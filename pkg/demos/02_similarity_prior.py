"""The frame similarity prior: what the degraded reference looks like and what
frames 2..l start from.

Run: python3 demos/02_similarity_prior.py [outdir]
Writes PPM images of the reference, its degradation for several p, and the
initial noisy frame at a few start times.
"""

import sys
from pathlib import Path

import numpy as np

from i2v_lab.cli import write_ppm
from i2v_lab.diffusion import make_vp_schedule
from i2v_lab.similarity_prior import DegradationParams, degrade, init_video_latents
from i2v_lab.training import from_model_space, generate_dataset, to_model_space

out = Path(sys.argv[1] if len(sys.argv) > 1 else "prior_demo")
out.mkdir(parents=True, exist_ok=True)

clip = generate_dataset(1, seed=8)[0]
x1 = to_model_space(clip.frames[0])
write_ppm(out / "reference.ppm", clip.frames[0])

for p in (0.0, 0.5, 1.0):
    d = degrade(x1, DegradationParams(p=p))
    write_ppm(out / f"degraded_p{p:.1f}.ppm", from_model_space(d))
    print(f"p={p:.1f}: mean |D(x) - x| = {np.abs(d - x1).mean():.4f}")

sched = make_vp_schedule(1000)
for t0 in (0.3, 0.6, 1.0):
    dp = DegradationParams(t0=t0)
    latent, step = init_video_latents(x1, dp, sched, 8, seed=0)
    a, s = sched.alpha[step], sched.sigma[step]
    print(f"t0={t0:.1f} -> step {step}: alpha={a:.4f} sigma={s:.4f}  (frame 1 untouched: {np.array_equal(latent.data[0], x1)})")
    write_ppm(out / f"init_frame2_t0_{t0:.1f}.ppm", from_model_space(latent.data[1]))
print("images written to", out)
