"""Two-stage training at miniature scale, then first-frame-conditioned sampling.

Stage 1 trains the text-to-video base on moving shapes.  Stage 2 freezes it
and trains only the adapter's query/output projections.  Step counts default
to a few minutes of CPU; raise them for better samples.

Run: python3 demos/03_two_stage_training.py [base_steps] [adapter_steps]
"""

import logging
import sys
import time

import numpy as np

from i2v_lab.diffusion import make_vp_schedule
from i2v_lab.evaluation import flow_score, frame_consistency
from i2v_lab.sampling import SamplerConfig, sample_i2v
from i2v_lab.similarity_prior import DegradationParams
from i2v_lab.training import (
    fixed_i2v_batches,
    from_model_space,
    generate_dataset,
    mean_i2v_loss,
    snapshot,
    to_model_space,
    train_base_stage,
    train_i2v_stage,
    verify_freeze,
)
from i2v_lab.video_model import VideoUNet, encode_image_condition, make_condition, null_condition

logging.basicConfig(level=logging.INFO, format="%(message)s")
base_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
adapter_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 100

train = generate_dataset(16, seed=0)
held = generate_dataset(4, seed=1)
sched = make_vp_schedule(1000)

model = VideoUNet(seed=0)
t = time.time()
h = train_base_stage(model, train, base_steps, seed=100)
print(f"base: {base_steps} steps in {time.time() - t:.0f}s, loss {np.mean(h.losses[:20]):.3f} -> {np.mean(h.losses[-20:]):.3f}")

frozen_before = snapshot(model)
model.attach_adapters()
probe = fixed_i2v_batches(model, held, 8, seed=7)
start = mean_i2v_loss(model, probe)
h = train_i2v_stage(model, train, adapter_steps, seed=200)
print(f"adapter: held-out masked loss {start:.4f} -> {mean_i2v_loss(model, probe):.4f}")
print("frozen weights untouched:", verify_freeze(frozen_before, snapshot(model.without_adapters()))[0])
print("max frozen-gradient norm seen:", max(h.frozen_grad_norms))

encoder = lambda f: encode_image_condition(to_model_space(f), model).data  # noqa: E731
sampler = SamplerConfig(steps=20)
dp = DegradationParams(t0=1.0, p=0.6)
for clip in held[:2]:
    ref = to_model_space(clip.frames[0])
    cond = make_condition(model, np.array(clip.caption), ref)
    video = from_model_space(sample_i2v(model, ref, cond, null_condition(model), sched, 8, dp, sampler, seed=0))
    print(f"{' '.join(clip.words):28s} consistency {frame_consistency(video, encoder):.3f}  flow {flow_score(video):.3f}px")
