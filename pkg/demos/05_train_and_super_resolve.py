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

# # Training a small 2.5D model and scoring it
#
# This is a shortened version of the desk experiment. It trains for a
# few dozen updates, so expect a model well short of the interpolation
# baselines. The point is the workflow.

# +
import numpy as np

from edmsr.edm import Preconditioner, SigmaDistribution, TrainConfig, smoothed, train
from edmsr.metrics import MetricReport, error_heatmap, evaluate_volume
from edmsr.samplers import karras_schedule
from edmsr.sr25d import SliceDataset, bicubic_baseline, super_resolve_25d
from edmsr.synth import synth_volume
from edmsr.unet import build_denoiser, desk_config
from edmsr.volume import Volume, degrade, percentile_normalize, to_unit
# -

rng = np.random.default_rng(0)
pairs = [degrade(to_unit(percentile_normalize(Volume(synth_volume((16, 32, 32), rng)))), 2) for _ in range(4)]
train_pairs, test_pair = pairs[:3], pairs[3]

# Each training sample is one HR slice with two conditions: the
# bicubic-upsampled LR slice and its previous neighbor.

cfg = desk_config("2.5d")
cfg.fourier_scale = 1.0
params, net = build_denoiser(cfg, seed=0)
tc = TrainConfig(lr=1e-2, batch_size=8, updates_per_epoch=40, epochs=1)
rows = train(params, net, SliceDataset(train_pairs), Preconditioner(), SigmaDistribution(), tc)
loss = smoothed([r["loss"] for r in rows], window=10)
print(f"smoothed loss {loss[0]:.4f} -> {loss[-1]:.4f}")

# Inference runs one Heun step per slice, starting from `sigma_max = 80`.

pred = super_resolve_25d(net, Preconditioner(), karras_schedule(n=1), test_pair.lr, 2, seed=0)
report = MetricReport()
report.extend(evaluate_volume(pred, test_pair.hr, "test", "edm25d"))
report.extend(evaluate_volume(bicubic_baseline(test_pair.lr, 2), test_pair.hr, "test", "bicubic"))
for method, agg in report.aggregates()["overall"].items():
    print(f"{method:8s} PSNR {agg['psnr_db']:.2f} dB  SSIM {agg['ssim']:.3f}")

# The error heatmap for the middle slice is an 8-bit image scaled to its
# own maximum error.

hm = error_heatmap(pred, test_pair.hr, 8)
print(hm.shape, hm.dtype, hm.max())
