"""Slice-wise 2.5D super-resolution conditioned on one neighbouring slice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edm import Preconditioner
from .samplers import NoiseSchedule, heun_sample, network_denoiser
from .volume import Domain, Volume, VolumeError, VolumePair, bicubic_upsample_slice


@dataclass(frozen=True)
class SliceCondition:
    target_lr_up: np.ndarray
    neighbor_lr_up: np.ndarray
    slice_index: int

    def stacked(self) -> np.ndarray:
        """(2, H, W) channel stack: neighbour first, then target."""
        return np.stack([self.neighbor_lr_up, self.target_lr_up])


def neighbor_index(i: int) -> int:
    return max(i - 1, 0)


def upsample_slices(lr_vol: Volume, s: int) -> np.ndarray:
    return np.stack([bicubic_upsample_slice(sl, s) for sl in lr_vol.data])


def build_slice_condition(lr_vol: Volume, i: int, s: int) -> SliceCondition:
    D = lr_vol.dims[0]
    if not 0 <= i < D:
        raise IndexError(f"slice index {i} outside [0, {D})")
    return SliceCondition(
        target_lr_up=bicubic_upsample_slice(lr_vol.data[i], s),
        neighbor_lr_up=bicubic_upsample_slice(lr_vol.data[neighbor_index(i)], s),
        slice_index=i,
    )


def super_resolve_25d(net, pc: Preconditioner, schedule: NoiseSchedule, lr_vol: Volume, s: int,
                      seed: int = 0, slices=None) -> Volume | np.ndarray:
    """Super-resolve every slice (or only ``slices``) independently and stack.

    Slice ``i`` starts from noise seeded by ``(seed, i)`` and reads only LR
    slices ``i`` and ``i - 1``.  Each slice is its own network call, so a
    slice recomputed alone is bit-identical to its place in the stack
    (batched BLAS reductions are not).  Returns a unit-range Volume, or
    a (len(slices), H, W) array when ``slices`` is given.
    """
    D, H, W = lr_vol.dims
    if min(H, W) < 4:
        raise VolumeError("LR slices must be at least 4x4")
    idx = list(range(D)) if slices is None else [int(i) for i in slices]
    denoiser = network_denoiser(net, pc)
    out = []
    for i in idx:
        cond = build_slice_condition(lr_vol, i, s).stacked()[None]
        x0 = schedule.sigma_max * np.random.default_rng([seed, i]).standard_normal((1, 1, s * H, s * W))
        out.append(heun_sample(denoiser, schedule, cond, x_init=x0)[0, 0])
    stack = np.clip(np.stack(out), -1.0, 1.0)
    if slices is not None:
        return stack
    return Volume(stack, Domain.UNIT, lr_vol.voxel_size)


def bicubic_baseline(lr_vol: Volume, s: int) -> Volume:
    return lr_vol.replace(np.clip(upsample_slices(lr_vol, s), -1.0, 1.0))


class SliceDataset:
    """Random (neighbour, target) conditioned slice triples for the 2.5D denoiser."""

    def __init__(self, pairs: list[VolumePair]):
        if not pairs:
            raise ValueError("empty dataset")
        self.up = [upsample_slices(p.lr, p.scale) for p in pairs]
        self.hr = [p.hr.data for p in pairs]

    def __len__(self):
        return len(self.hr)

    def sample(self, rng: np.random.Generator, n: int):
        conds, hrs = [], []
        for _ in range(n):
            v = int(rng.integers(len(self.hr)))
            i = int(rng.integers(self.hr[v].shape[0]))
            conds.append(np.stack([self.up[v][neighbor_index(i)], self.up[v][i]]))
            hrs.append(self.hr[v][i])
        return np.stack(conds), np.stack(hrs)[:, None]
