# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Overlapping patches for the 3D pipeline
#
# Volumes are processed in overlapping patches. Each patch output is
# weighted by a separable Hann window with a small floor, and the weighted
# sum is divided by the summed weights.

# +
import numpy as np

from edmsr.sr3d import blend_patches, hann_window, plan_patches
# -

print(np.round(hann_window(8, floor=0.05), 3))

# A 64-cube with 32x64x64 patches at half overlap needs three positions
# along depth.

plan = plan_patches((64, 64, 64), (32, 64, 64), overlap=0.5)
print(plan.positions)

# If every patch returns its own input, blending reproduces the volume
# up to rounding, whatever the plan.

rng = np.random.default_rng(0)
vol = rng.normal(size=(20, 23, 17))
plan = plan_patches(vol.shape, (8, 10, 6), overlap=0.4)
out = blend_patches(plan, [vol[plan.slices(p)] for p in plan.positions])
print(len(plan.positions), "patches, max error", np.abs(out - vol).max())

# Where two patches disagree, the seam is a smooth cross-fade.

plan = plan_patches((1, 1, 12), (1, 1, 8), overlap=0.5)
print(plan.positions)
print(np.round(blend_patches(plan, [np.zeros((1, 1, 8)), np.ones((1, 1, 8))])[0, 0], 3))
