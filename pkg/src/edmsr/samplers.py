"""Probability-flow ODE samplers (Euler and Heun) over a Karras sigma grid.

A denoiser here is any callable ``denoiser(x, sigma, condition) -> x0``
on numpy arrays.  The ODE solved is ``dx/dsigma = (x - D(x, sigma)) / sigma``
from ``sigma_max`` down to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from .edm import Preconditioner, denoise


class SamplerError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2 or s[-1] != 0 or np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be strictly decreasing and end at 0")
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)

    @property
    def steps(self) -> int:
        return self.sigmas.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])


def karras_schedule(sigma_max: float = 80.0, sigma_min: float = 0.002, rho: float = 7.0,
                    n: int = 20) -> NoiseSchedule:
    """rho-spaced grid of ``n`` levels from sigma_max to sigma_min, then 0."""
    if not sigma_max > sigma_min > 0:
        raise ValueError("need sigma_max > sigma_min > 0")
    if n < 1:
        raise ValueError("need at least one step")
    if n == 1:
        return NoiseSchedule(np.array([sigma_max, 0.0]))
    ramp = np.arange(n) / (n - 1)
    hi, lo = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
    sig = (hi + ramp * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    return NoiseSchedule(np.append(sig, 0.0))


def _check(x, i, sigma):
    if not np.all(np.isfinite(x)):
        raise SamplerError(f"non-finite sampler state at step {i} (sigma={sigma:.6g})")


def _initial(schedule, shape, rng, x_init):
    if x_init is not None:
        return np.array(x_init, dtype=np.float64)
    return schedule.sigmas[0] * rng.standard_normal(shape)


def euler_sample(denoiser, schedule: NoiseSchedule, condition=None, shape=None,
                 rng: np.random.Generator | None = None, x_init=None,
                 return_trajectory: bool = False):
    """First-order probability-flow integration.

    The state starts at ``sigma_max * eps`` (or ``x_init``).
    """
    x = _initial(schedule, shape, rng, x_init)
    traj = [x.copy()]
    sig = schedule.sigmas
    for i in range(schedule.steps):
        d = (x - denoiser(x, sig[i], condition)) / sig[i]
        x = x + (sig[i + 1] - sig[i]) * d
        _check(x, i, sig[i])
        traj.append(x.copy())
    return (x, traj) if return_trajectory else x


def heun_sample(denoiser, schedule: NoiseSchedule, condition=None, shape=None,
                rng: np.random.Generator | None = None, x_init=None,
                return_trajectory: bool = False):
    """Second-order (trapezoidal) integration; the step into sigma = 0 is plain Euler."""
    x = _initial(schedule, shape, rng, x_init)
    traj = [x.copy()]
    sig = schedule.sigmas
    for i in range(schedule.steps):
        d = (x - denoiser(x, sig[i], condition)) / sig[i]
        dt = sig[i + 1] - sig[i]
        x_pred = x + dt * d
        if sig[i + 1] > 0:
            d2 = (x_pred - denoiser(x_pred, sig[i + 1], condition)) / sig[i + 1]
            x = x + dt * 0.5 * (d + d2)
        else:
            x = x_pred
        _check(x, i, sig[i])
        traj.append(x.copy())
    return (x, traj) if return_trajectory else x


def network_denoiser(net, pc: Preconditioner):
    """Wrap a U-Net as a numpy ``denoiser(x, sigma, condition)`` without graph recording."""

    def fn(x, sigma, condition):
        with dg.no_grad():
            return denoise(net, pc, x, sigma, condition).data

    return fn


def linear_oracle(pc: Preconditioner):
    """Optimal denoiser for data ~ N(0, sigma_data^2): D(x, sigma) = c_skip(sigma) x."""
    sd2 = pc.sigma_data ** 2

    def fn(x, sigma, condition=None):
        return sd2 / (sigma ** 2 + sd2) * x

    return fn


def linear_oracle_factor(sigma_start: float, sigma_end: float, sigma_data: float = 0.5) -> float:
    """Exact ODE transport factor under :func:`linear_oracle`."""
    sd2 = sigma_data ** 2
    return float(np.sqrt((sigma_end ** 2 + sd2) / (sigma_start ** 2 + sd2)))
