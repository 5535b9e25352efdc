# %% [markdown]
# # Synthetic corpus
# Templates, instances and the geometric transforms used everywhere else.

# %%
import numpy as np

from ktl import synth

corpus = synth.generate_corpus(12, seed=0)
s = corpus[0]
print(s.raster.shape, s.gt_landmarks.shape, "visible:", int(s.visible.sum()))
print("symmetry map:", s.symmetry_map)

# %% [markdown]
# A crude ASCII view of one raster, dark pixels as '#'.

# %%
for row in s.raster[::4, ::2]:
    print("".join("#" if v < 0.35 else ("+" if v < 0.6 else ".") for v in row))

# %% [markdown]
# Flipping twice gives back the same sample, landmark for landmark.

# %%
back = synth.flip_sample(synth.flip_sample(s))
print("double flip exact:", np.array_equal(back.raster, s.raster),
      np.allclose(back.gt_landmarks, s.gt_landmarks))

# %%
rng = np.random.default_rng(1)
g = synth.random_transform(rng, 0.6)
moved = synth.apply_transform(s, g)
print("landmarks still visible after a random warp:", int(moved.visible.sum()))
print("manifest hash:", synth.manifest_hash(corpus)[:16])
