# %% [markdown]
# # Ablations at toy scale
# Same sweeps as `ktl ablate`, shrunk so they finish quickly.  The desk-scale
# numbers come from the acceptance suite; these only show the plumbing.

# %%
import torch

from ktl import experiments as ex

torch.set_num_threads(1)
tiny = dict(warmup_iters=10, recluster_every=10, total_rounds=2, batch_size=4, hidden=8, desc_dim=8,
            stage2_iters=10, nms_threshold=0.1)

# %%
mix = ex.noise_mixture(ratios=(1.0, 0.2), n_train=40, n_test=16, K=8, M=16, **tiny)
for r, res in mix.items():
    print("real ratio", r, "forward by round", [round(v, 1) for v in res.stage1_nme])

# %%
sweep = ex.cluster_sweep(Ms=(8, 16), K=8, n_train=40, n_test=16, **tiny)
for M, res in sweep.items():
    print("M =", M, "forward %.2f" % res.stage1_nme[-1])

# %%
strat = ex.strategy_sweep(n_train=40, n_test=16, K=8, M=16, **tiny)
for name, res in strat.items():
    print(f"{name:32s} {res.stage1_nme[-1]:.2f}")
