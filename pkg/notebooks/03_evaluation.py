# %% [markdown]
# # Forward and backward error
# A linear regressor maps discovered landmarks onto annotated ones (forward)
# and back (backward).  Toy shapes first, then a trained model.

# %%
import numpy as np
import torch

from ktl import experiments as ex, synth
from ktl.evaluation import forward_backward_eval, ced_curve
from ktl.plotting import plot_ced
from ktl.training import TrainConfig

torch.set_num_threads(1)
rng = np.random.default_rng(0)
base = rng.uniform(10, 50, (6, 2))
base[0], base[1] = [20, 20], [40, 20]
a = np.eye(2) + rng.normal(0, 0.1, (120, 2, 2))
gt = np.einsum("nij,kj->nki", a, base) + rng.normal(0, 3, (120, 1, 2))
tr, te = np.arange(80), np.arange(80, 120)

# %% [markdown]
# A relabelled copy of the truth is perfect both ways.  A landmark that jumps
# around at random barely moves forward error but hurts backward error.

# %%
perfect = forward_backward_eval(gt[:, ::-1], gt, tr, te)
noisy = gt + rng.normal(0, 0.5, gt.shape)
noisy[:, 3] = rng.uniform(0, 60, (120, 2))
bad = forward_backward_eval(noisy, gt, tr, te)
print("perfect: %.2g / %.2g" % (perfect.forward_nme, perfect.backward_nme))
print("one unstable landmark: %.2f / %.2f" % (bad.forward_nme, bad.backward_nme))
print("CED points:", len(ced_curve(np.array([1.0, 2.0, 2.0, 5.0]))))

# %%
train, test = synth.generate_corpus(60, seed=0), synth.generate_corpus(20, seed=10_000)
cfg = TrainConfig(warmup_iters=20, recluster_every=20, total_rounds=2, batch_size=4, hidden=8,
                  desc_dim=8, K=8, M=16, stage2_iters=20, nms_threshold=0.1, learning_rate=1e-3)
res = ex.train_and_evaluate("tiny", train, test, ex.mixture_keypoints(train, 15, 1.0, 3.0), cfg)
print(res.summary())
svg = plot_ced({"stage 1": res.stage1_report.ced, "stage 2": res.stage2_report.ced})
print(svg[:60], "...")
