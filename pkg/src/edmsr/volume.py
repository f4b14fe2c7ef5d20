"""Volumes, intensity normalization, degradation and resampling.

Axis convention: arrays are (D, H, W) with W fastest; axis 0 is the
slicing (sagittal) axis.  Resampling uses the align-corners-false
mapping: output sample ``i`` sits at input coordinate
``(i + 0.5) / s - 0.5``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


class Domain(enum.Enum):
    RAW = "raw"
    BYTE255 = "byte255"
    UNIT = "unit"


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    domain: Domain = Domain.RAW
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise VolumeError(f"volume must be a non-empty (D, H, W) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite values")
        if self.domain is Domain.BYTE255 and (arr.min() < 0 or arr.max() > 255):
            raise VolumeError("byte-range volume outside [0, 255]")
        if self.domain is Domain.UNIT and (arr.min() < -1 or arr.max() > 1):
            raise VolumeError("unit-range volume outside [-1, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def replace(self, data, domain: Domain | None = None) -> "Volume":
        return Volume(data, self.domain if domain is None else domain, self.voxel_size)


@dataclass(frozen=True)
class VolumePair:
    lr: Volume
    hr: Volume
    scale: int

    def __post_init__(self):
        (dl, hl, wl), (dh, hh, wh) = self.lr.dims, self.hr.dims
        if dl != dh:
            raise VolumeError(f"depth must be preserved: LR {dl} vs HR {dh}")
        if hh != self.scale * hl or wh != self.scale * wl:
            raise VolumeError(f"HR in-plane dims {hh}x{wh} are not {self.scale}x LR {hl}x{wl}")
        if self.lr.domain is not self.hr.domain:
            raise VolumeError("LR and HR must share an intensity domain")


def _require(vol: Volume, domain: Domain, op: str) -> None:
    if vol.domain is not domain:
        raise VolumeError(f"{op} expects a {domain.value} volume, got {vol.domain.value}")


def nearest_rank_percentile(values: np.ndarray, p) -> float:
    """Smallest value with at least p% of the data at or below it."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = flat.size
    rank = max(1, math.ceil(Fraction(p) * n / 100))
    return float(flat[min(rank, n) - 1])


def percentile_normalize(vol: Volume, low=1, high=99) -> Volume:
    """Map [p_low, p_high] linearly onto [0, 255], clipping outside."""
    _require(vol, Domain.RAW, "percentile_normalize")
    lo = nearest_rank_percentile(vol.data, low)
    hi = nearest_rank_percentile(vol.data, high)
    if hi <= lo:
        raise VolumeError(f"degenerate intensity range: p{low} == p{high} == {lo}")
    out = np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return vol.replace(out, Domain.BYTE255)


def to_unit(vol: Volume) -> Volume:
    _require(vol, Domain.BYTE255, "to_unit")
    return vol.replace(np.clip(vol.data / 127.5 - 1.0, -1.0, 1.0), Domain.UNIT)


def from_unit(vol: Volume) -> Volume:
    _require(vol, Domain.UNIT, "from_unit")
    return vol.replace(np.clip((vol.data + 1.0) * 127.5, 0.0, 255.0), Domain.BYTE255)


def block_average_downsample(vol: Volume, s: int) -> Volume:
    """In-plane s x s block means; depth untouched."""
    D, H, W = vol.dims
    if s < 1 or H % s or W % s:
        raise VolumeError(f"in-plane dims {H}x{W} not divisible by {s}")
    out = vol.data.reshape(D, H // s, s, W // s, s).mean(axis=(2, 4))
    return vol.replace(out)


def linear_matrix(n_in: int, s: int) -> np.ndarray:
    """(n_in * s, n_in) linear interpolation weights, borders clamped."""
    n_out = n_in * s
    x = np.clip((np.arange(n_out) + 0.5) / s - 0.5, 0.0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = x - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    w = np.where(
        d <= 1,
        (a + 2) * d ** 3 - (a + 3) * d ** 2 + 1,
        a * d ** 3 - 5 * a * d ** 2 + 8 * a * d - 4 * a,
    )
    return w


def cubic_matrix(n_in: int, s: int, a: float = -0.5) -> np.ndarray:
    """(n_in * s, n_in) cubic interpolation weights with edge replication."""
    n_out = n_in * s
    x = (np.arange(n_out) + 0.5) / s - 0.5
    base = np.floor(x).astype(int)
    w = cubic_weights(x - base, a)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k, off in enumerate((-1, 0, 1, 2)):
        np.add.at(m, (rows, np.clip(base + off, 0, n_in - 1)), w[:, k])
    return m


def _apply_axis(arr: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, arr, axes=([1], [axis])), 0, axis)


def trilinear_upsample(vol: Volume, s: int, in_plane: bool = True) -> Volume:
    """Linear upsampling by ``s`` along H and W (and D when ``in_plane`` is False)."""
    if s < 1:
        raise VolumeError("scale must be >= 1")
    arr = vol.data
    axes = (1, 2) if in_plane else (0, 1, 2)
    for ax in axes:
        arr = _apply_axis(arr, linear_matrix(arr.shape[ax], s), ax)
    return vol.replace(arr)


def bicubic_upsample_slice(img: np.ndarray, s: int, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom upsampling of a 2D image by ``s``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 4:
        raise VolumeError(f"bicubic upsampling needs a 2D image of at least 4x4, got {img.shape}")
    if s < 1:
        raise VolumeError("scale must be >= 1")
    out = cubic_matrix(img.shape[0], s, a) @ img
    return out @ cubic_matrix(img.shape[1], s, a).T


def extract_slices(vol: Volume) -> list[np.ndarray]:
    return [vol.data[i].copy() for i in range(vol.dims[0])]


def restack(slices, domain: Domain = Domain.RAW, voxel_size=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(np.stack(slices, axis=0), domain, voxel_size)


def degrade(hr: Volume, s: int) -> VolumePair:
    """Block-average ``hr`` into its LR counterpart."""
    return VolumePair(block_average_downsample(hr, s), hr, s)
