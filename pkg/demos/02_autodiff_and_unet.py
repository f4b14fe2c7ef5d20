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

# # A small autodiff engine and the conditional U-Net
#
# Everything trains on `edmsr.diffgraph`, a float64 reverse-mode engine
# over numpy arrays. Operations record their parents; `backward` walks
# the graph once in reverse topological order.

# +
import numpy as np

from edmsr import diffgraph as dg
from edmsr.diffgraph import ParameterStore, Tensor
from edmsr.unet import build_denoiser, desk_config, param_count
# -

params = ParameterStore()
w = params.add("w", np.array([[1.0, -2.0], [0.5, 3.0]]))
x = Tensor(np.array([[1.0, 2.0]]))
loss = dg.mean(dg.square(dg.linear(x, w)))
params.zero_grad()
dg.backward(loss)
print("loss", loss.data, "\ndL/dw\n", w.grad)

# Central differences agree with the analytic gradient.

report = dg.grad_check(lambda: dg.mean(dg.square(dg.linear(x, w))), params, n_coords=4)
print(report)

# ## The desk-sized denoisers
#
# One builder serves both pipelines. The 2D network takes the noisy
# slice plus two condition channels. The 3D one takes the noisy patch
# plus one upsampled LR patch.

for arch in ("2.5d", "3d"):
    cfg = desk_config(arch)
    p, net = build_denoiser(cfg, seed=0)
    print(arch, cfg.dims, "D,", cfg.in_channels, "input channels,", param_count(p), "parameters")

# A freshly built network outputs exactly zero, because its last
# convolution starts at zero. The preconditioned denoiser therefore starts
# as `c_skip * x`.

p, net = build_denoiser(desk_config("2.5d"), seed=0)
rng = np.random.default_rng(0)
out = net(rng.normal(size=(2, 1, 16, 16)), np.array([0.1, -0.3]), rng.normal(size=(2, 2, 16, 16)))
print(out.shape, np.abs(out.data).max())

# Checkpoints are a small binary container of named arrays plus JSON
# metadata.

# +
import tempfile
from pathlib import Path

with tempfile.TemporaryDirectory() as d:
    dg.save_checkpoint(Path(d) / "m.ckpt", p.state(), {"arch": "2.5d"})
    arrays, meta = dg.load_checkpoint(Path(d) / "m.ckpt")
print(meta, len(arrays), "arrays")
# -
