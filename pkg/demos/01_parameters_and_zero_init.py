"""How many weights does the adapter add, and does a fresh adapter change anything?

Run: python3 demos/01_parameters_and_zero_init.py
"""

import numpy as np

from i2v_lab.diffusion import make_vp_schedule
from i2v_lab.sampling import SamplerConfig, sample_i2v
from i2v_lab.similarity_prior import DegradationParams
from i2v_lab.training import generate_dataset, to_model_space
from i2v_lab.video_model import (
    VideoUNet,
    analytic_trainable_count,
    make_condition,
    null_condition,
    partition_parameters,
    reference_claims,
)

model = VideoUNet(seed=0)
model.attach_adapters()
_, counts = partition_parameters(model)
print("frozen parameters   :", counts["frozen"])
print("trainable parameters:", counts["trainable"], "(2 * d^2 per host =", analytic_trainable_count(model.config), ")")
print(f"trainable fraction  : {counts['fraction']:.4f}")
print("published scale, not reproduced here:", reference_claims())

# Untrained base weights output zero everywhere, so give every zero-initialized
# base tensor some mass first; otherwise the comparison below is vacuous.
rng = np.random.default_rng(1)
for p in model.params.values():
    if not p.data.any():
        p.data = 0.02 * rng.standard_normal(p.data.shape)

clip = generate_dataset(1, seed=3)[0]
ref = to_model_space(clip.frames[0])
cond = make_condition(model, np.array(clip.caption), ref)
sched = make_vp_schedule(1000)
sampler = SamplerConfig(steps=6, guidance=2.0)
dp = DegradationParams(t0=0.7)
with_adapter = sample_i2v(model, ref, cond, null_condition(model), sched, 8, dp, sampler, seed=5)
without = sample_i2v(model.without_adapters(), ref, cond, null_condition(model), sched, 8, dp, sampler, seed=5)
print("caption:", " ".join(clip.words))
print("fresh adapter output identical to base output:", np.array_equal(with_adapter, without))
