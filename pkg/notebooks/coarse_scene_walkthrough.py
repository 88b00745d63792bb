# %% [markdown]
# Coarse scene from pairwise pointmaps
#
# Generate an analytic box room, estimate the shared focal from the pair
# predictions, align every pair into one cloud and compare the recovered poses
# with the ground truth.

# %%
import numpy as np

from d2t.coarse_init import align_global, estimate_shared_focal, extract_depths
from d2t.evaluation import Trajectory, pose_metrics
from d2t.geometry import CameraIntrinsics
from d2t.pipeline.synthetic import SyntheticSceneSpec, generate
from d2t.coarse_init import ViewGraph

spec = SyntheticSceneSpec(kind="box", n_views=3, width=64, height=48, focal=56.0)
scene = generate(spec, seed=0)
graph = ViewGraph(spec.n_views, scene.pairs)

# %%
focal = estimate_shared_focal(graph)
print(f"focal estimate {focal:.4f}  ground truth {spec.focal}")

# %%
K = CameraIntrinsics(focal, spec.width, spec.height)
state = align_global(graph, K)
print("alignment objective", state.objective(graph))
depths = extract_depths(state)
print("depth range per view", [(float(d.min()), float(d.max())) for d in depths])

# %%
metrics = pose_metrics(Trajectory.from_poses(state.view_poses), Trajectory.from_poses(scene.poses))
print(metrics)
