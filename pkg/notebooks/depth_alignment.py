# %% [markdown]
# Aligning a monocular depth map to trusted coarse depth
#
# The mono map is affine in inverse depth. Pixels outside the most confident
# fraction are corrupted on purpose; the fit only looks at the trusted ones.

# %%
import numpy as np

from d2t.depth_align import align_view_depth, top_p_mask
from d2t.pipeline.synthetic import SyntheticSceneSpec, generate

scene = generate(SyntheticSceneSpec(kind="box", mono_affine=(2.0, 0.3)), seed=3)
depth = scene.depths[0]
mono = scene.mono[0]

rng = np.random.default_rng(0)
confidence = rng.uniform(size=depth.shape)
trusted = top_p_mask(confidence, 0.3)
coarse = depth.copy()
coarse[~trusted] *= rng.uniform(1.0, 3.0, size=(~trusted).sum())  # wrong outside the mask

# %%
aligned, fit = align_view_depth(coarse, [confidence], mono, P=0.3)
print(f"scale {fit.scale:.6f} shift {fit.shift:.6f}")
print("max relative depth error", float(np.max(np.abs(aligned - depth) / depth)))
