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

# # Preconditioning and the probability-flow samplers
#
# The denoiser never sees raw noisy input. It sees `c_in * x`, predicts a
# residual scaled by `c_out`, and adds back `c_skip * x`. This notebook
# looks at those coefficients and at the two samplers built on top.

# +
import numpy as np

from edmsr.edm import Preconditioner, precondition_coeffs
from edmsr.samplers import euler_sample, heun_sample, karras_schedule, linear_oracle, linear_oracle_factor
# -

pc = Preconditioner(sigma_data=0.5)
for sigma in (0.002, 0.1, 0.5, 2.0, 80.0):
    c_in, c_skip, c_out, c_noise = precondition_coeffs(sigma, pc)
    print(f"sigma={sigma:7.3f}  c_in={c_in:.4f}  c_skip={c_skip:.4f}  c_out={c_out:.4f}  c_noise={c_noise:+.4f}")

# At `sigma == sigma_data` the skip weight is exactly one half, and the
# noise embedding input vanishes at `sigma == 1`.

print(precondition_coeffs(0.5, pc)[1], precondition_coeffs(1.0, pc)[3])

# ## The noise schedule
#
# Levels are spaced uniformly in `sigma**(1/rho)` with `rho = 7`, which
# packs most steps near the clean end. A final zero is appended.

sched = karras_schedule(sigma_max=80.0, sigma_min=0.002, rho=7.0, n=8)
print(np.round(sched.sigmas, 4))

# ## A denoiser with a known answer
#
# If the network output is always zero the denoiser is `c_skip(sigma) * x`.
# The ODE then has a closed form: the state scales by
# `sqrt(sigma_end**2 + sd**2) / sqrt(sigma_start**2 + sd**2)`.
# Going from 80 to 0 at `sd = 0.5` gives the factor below.

exact = linear_oracle_factor(80.0, 0.0, 0.5)
print(f"exact end-to-end factor {exact:.10f}")

# Both samplers approach it; Heun does so faster.

for n in (10, 20, 40, 80, 160):
    e = abs(euler_sample(linear_oracle(pc), karras_schedule(n=n), x_init=np.ones(1))[0] / exact - 1)
    h = abs(heun_sample(linear_oracle(pc), karras_schedule(n=n), x_init=np.ones(1))[0] / exact - 1)
    print(f"N={n:4d}  Euler rel err {e:.3e}   Heun rel err {h:.3e}")

# Heun skips its correction on the final step into `sigma = 0`, but that
# step starts from `sigma_min = 0.002` and barely moves the state. Measured
# at the last nonzero level, the error shrinks about four-fold per
# doubling of N, the second-order rate.

for n in (10, 20, 40, 80, 160):
    _, traj = heun_sample(linear_oracle(pc), karras_schedule(n=n), x_init=np.ones(1), return_trajectory=True)
    print(n, abs(traj[-2][0] / linear_oracle_factor(80.0, 0.002, 0.5) - 1))
