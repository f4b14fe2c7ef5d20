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

# # Volumes, degradation and NIfTI files
#
# A `Volume` carries its array in (D, H, W) order plus a domain tag. The
# tag says whether intensities are raw, normalized to [0, 1], or in the
# unit range [-1, 1] that the models use.

# +
import tempfile
from pathlib import Path

import numpy as np

from edmsr.nifti_io import read_volume, write_volume
from edmsr.sr3d import trilinear_baseline
from edmsr.sr25d import bicubic_baseline
from edmsr.metrics import psnr
from edmsr.synth import synth_volume
from edmsr.volume import Volume, degrade, percentile_normalize, to_unit
# -

# Synthetic heads are sums of smooth blobs inside an ellipsoidal shell.

raw = Volume(synth_volume((16, 32, 32), np.random.default_rng(0)))
print(raw.domain, raw.dims, raw.data.min().round(3), raw.data.max().round(3))

# Percentile normalization clips to the 1st and 99th percentile, then the
# result is mapped to [-1, 1]. Degrading by block averaging in-plane gives
# the low-resolution partner.

hr = to_unit(percentile_normalize(raw))
pair = degrade(hr, 2)
print(pair.hr.dims, "->", pair.lr.dims)

# Two interpolation baselines bring the LR volume back to HR size.

for name, up in (("bicubic", bicubic_baseline(pair.lr, 2)), ("trilinear", trilinear_baseline(pair.lr, 2))):
    print(f"{name:9s} slice-mean PSNR {np.mean([psnr(a, b) for a, b in zip(up.data, pair.hr.data)]):.2f} dB")

# ## NIfTI-1 round trip
#
# Files are written as float32 with the fastest axis W. Gzip is detected
# from the first bytes, not from the file name.

with tempfile.TemporaryDirectory() as d:
    for name in ("hr.nii", "hr.nii.gz"):
        write_volume(pair.hr, Path(d) / name)
        back = read_volume(Path(d) / name)
        print(name, back.dims, "max abs diff", np.abs(back.data - pair.hr.data).max())
