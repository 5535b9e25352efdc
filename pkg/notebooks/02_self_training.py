# %% [markdown]
# # Self-training
# Warm-up on transform pairs, then a few rounds of clustering and retraining,
# then the K-channel detector.  Sizes are tiny so this runs in well under a minute.

# %%
import numpy as np
import torch

from ktl import experiments as ex, synth
from ktl.training import TrainConfig, run_stage1, run_stage2, infer

torch.set_num_threads(1)
train = synth.generate_corpus(40, seed=0)
kps = ex.mixture_keypoints(train, 15, 0.4, 3.0, seed=0)
print("initial points per image:", np.mean([len(k) for k in kps]))

# %%
cfg = TrainConfig(warmup_iters=20, recluster_every=20, total_rounds=3, batch_size=4, hidden=8,
                  desc_dim=8, K=8, M=16, stage2_iters=20, nms_threshold=0.1, learning_rate=1e-3)
state = run_stage1(train, kps, cfg)
for rec in state.metrics_log:
    print(rec["round"], "L_d=%.4f L_f=%.4f ppi=%.2f" % (rec["L_d"], rec["L_f"], rec["points_per_image"]))

# %% [markdown]
# Every image keeps at most K points and never two with the same label.

# %%
worst = max(len(v["labels"]) for v in state.labels.per_image.values())
dupes = sum(len(set(v["labels"].tolist())) != len(v["labels"]) for v in state.labels.per_image.values())
print("max points:", worst, "images with repeated labels:", dupes)

# %%
model = run_stage2(state, train, cfg)
pts = infer(model, train[0].raster)
print("stage-2 output", pts.shape, "symmetry", model.symmetry)
