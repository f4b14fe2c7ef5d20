"""U-Net backbones for the 3D and 2.5D denoisers.

Both share one builder; ``UNetConfig.dims`` selects 2D or 3D
convolutions.  Noise conditioning enters through Fourier features of
``c_noise`` followed by a two-layer MLP, and is injected into every
residual block by adaptive group normalization::

    y = group_norm(x) * (1 + scale(emb)) + shift(emb)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffgraph as dg
from .diffgraph import GraphError, ParameterStore, Tensor


@dataclass
class UNetConfig:
    dims: int = 3
    channels: tuple[int, ...] = (8, 16)
    res_blocks: int = 2
    attention: bool = True
    in_channels: int = 2
    noise_embed_dim: int = 16
    cond_dim: int = 32
    norm_groups: int = 4
    heads: int = 4
    fourier_scale: float = 16.0
    input_skip: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if not self.channels or self.res_blocks < 1 or self.in_channels < 2:
            raise ValueError("need at least one level, one res block and two input channels")
        if self.noise_embed_dim % 2:
            raise ValueError("noise_embed_dim must be even (cos/sin pairs)")
        for c in self.channels:
            if c % self.norm_groups:
                raise ValueError(f"channel count {c} not divisible by {self.norm_groups} norm groups")
        if self.attention and self.channels[-1] % self.heads:
            raise ValueError(f"deepest channels {self.channels[-1]} not divisible by {self.heads} heads")

    @property
    def spatial_multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def desk_config(arch: str) -> UNetConfig:
    if arch == "3d":
        return UNetConfig(dims=3, channels=(8, 16), in_channels=2)
    if arch == "2.5d":
        return UNetConfig(dims=2, channels=(8, 8, 16), in_channels=3)
    raise ValueError(f"unknown arch {arch!r}")


def paper_config(arch: str) -> UNetConfig:
    """Full-size channel layouts; constructible, not trained in tests."""
    if arch == "3d":
        return UNetConfig(dims=3, channels=(32, 64, 128, 256), in_channels=2,
                          noise_embed_dim=256, cond_dim=256, norm_groups=32 // 4)
    if arch == "2.5d":
        return UNetConfig(dims=2, channels=(64, 64, 128, 256), in_channels=3,
                          noise_embed_dim=256, cond_dim=256, norm_groups=32 // 4)
    raise ValueError(f"unknown arch {arch!r}")


class UNet:
    """Functional U-Net: parameters live in a :class:`ParameterStore`."""

    def __init__(self, cfg: UNetConfig, params: ParameterStore, fourier: np.ndarray):
        self.cfg = cfg
        self.params = params
        self.fourier = fourier

    # -- blocks --------------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return dg.conv(x, self._p(name + ".weight"), self._p(name + ".bias"), stride=stride)

    def _adagn(self, name: str, x: Tensor, emb: Tensor) -> Tensor:
        c = x.shape[1]
        ss = dg.linear(emb, self._p(name + ".weight"), self._p(name + ".bias"))
        scale = _slice_cols(ss, 0, c)
        shift = _slice_cols(ss, c, 2 * c)
        return dg.scale_shift(dg.group_norm(x, self.cfg.norm_groups), scale, shift)

    def _res(self, name: str, x: Tensor, emb: Tensor) -> Tensor:
        h = self._conv(name + ".conv1", dg.silu(self._adagn(name + ".norm1", x, emb)))
        h = self._conv(name + ".conv2", dg.silu(self._adagn(name + ".norm2", h, emb)))
        skip = self._conv(name + ".skip", x) if name + ".skip.weight" in self.params else x
        return dg.add(h, skip)

    def _attn(self, name: str, x: Tensor) -> Tensor:
        B, C = x.shape[:2]
        sp = x.shape[2:]
        T = int(np.prod(sp))
        heads = self.cfg.heads
        d = C // heads
        qkv = self._conv(name + ".qkv", dg.group_norm(x, self.cfg.norm_groups))
        # (B, 3C, T) -> (3, B, heads, T, d)
        qkv = dg.transpose(dg.reshape(qkv, (B, 3, heads, d, T)), (1, 0, 2, 4, 3))
        q, k, v = (_take0(qkv, i) for i in range(3))
        o = dg.attention(q, k, v)
        o = dg.reshape(dg.transpose(o, (0, 1, 3, 2)), (B, C) + sp)
        return dg.add(x, self._conv(name + ".proj", o))

    def embed(self, c_noise) -> Tensor:
        c = np.atleast_1d(np.asarray(c_noise, dtype=np.float64))
        f = 2.0 * math.pi * c[:, None] * self.fourier[None, :]
        feats = Tensor(np.concatenate([np.cos(f), np.sin(f)], axis=1))
        h = dg.silu(dg.linear(feats, self._p("embed.fc1.weight"), self._p("embed.fc1.bias")))
        return dg.linear(h, self._p("embed.fc2.weight"), self._p("embed.fc2.bias"))

    # -- forward -------------------------------------------------------------

    def __call__(self, x_in, c_noise, condition, *, zero_skips: bool = False) -> Tensor:
        """Raw network output F(x_in, c_noise, condition).

        ``x_in`` is the already ``c_in``-scaled noisy state, shape
        (B, 1, *S); ``condition`` is (B, in_channels - 1, *S) and is
        treated as a constant.  ``c_noise`` is a scalar or shape (B,).
        """
        cfg = self.cfg
        x_in = dg.as_tensor(x_in)
        cond = np.asarray(condition.data if isinstance(condition, Tensor) else condition, dtype=np.float64)
        if x_in.ndim != cfg.dims + 2 or x_in.shape[1] != 1:
            raise GraphError(f"expected noisy input (B, 1, *S) with {cfg.dims} spatial dims, got {x_in.shape}")
        if cond.shape != (x_in.shape[0], cfg.in_channels - 1) + x_in.shape[2:]:
            raise GraphError(f"condition shape {cond.shape} does not match input {x_in.shape}"
                             f" with {cfg.in_channels - 1} condition channels")
        if any(n % cfg.spatial_multiple for n in x_in.shape[2:]):
            raise GraphError(f"spatial dims {x_in.shape[2:]} not divisible by {cfg.spatial_multiple}")
        B = x_in.shape[0]
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (B,))
        emb = self.embed(c_noise)

        h = self._conv("conv_in", dg.concat([x_in, Tensor(cond)], axis=1))
        skips = []
        L = len(cfg.channels)
        for lvl in range(L):
            for r in range(cfg.res_blocks):
                h = self._res(f"down.{lvl}.res.{r}", h, emb)
                skips.append(h)
            if lvl < L - 1:
                h = self._conv(f"down.{lvl}.downsample", h, stride=2)
        h = self._res("mid.res.0", h, emb)
        if cfg.attention:
            h = self._attn("mid.attn", h)
        h = self._res("mid.res.1", h, emb)
        for lvl in reversed(range(L)):
            for r in range(cfg.res_blocks):
                s = skips.pop()
                if zero_skips:
                    s = Tensor(np.zeros(s.shape))
                h = self._res(f"up.{lvl}.res.{r}", dg.concat([h, s], axis=1), emb)
            if lvl > 0:
                h = self._conv(f"up.{lvl}.upsample", dg.upsample_nearest(h, 2))
        h = dg.silu(dg.group_norm(h, cfg.norm_groups))
        if cfg.input_skip:
            h = dg.concat([h, x_in, Tensor(cond)], axis=1)
        return self._conv("conv_out", h)


def _slice_cols(t: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros(t.shape)
        full[:, start:stop] = g
        return (full,)

    return dg._make(t.data[:, start:stop], (t,), bw)


def _take0(t: Tensor, i: int) -> Tensor:
    def bw(g):
        full = np.zeros(t.shape)
        full[i] = g
        return (full,)

    return dg._make(t.data[i], (t,), bw)


def _init_conv(params, rng, name, cin, cout, k, dims, zero=False):
    shape = (cout, cin) + (k,) * dims
    bound = 1.0 / math.sqrt(cin * k ** dims)
    if zero:
        params.add(name + ".weight", np.zeros(shape))
        params.add(name + ".bias", np.zeros(cout))
    else:
        params.add(name + ".weight", rng.uniform(-bound, bound, shape))
        params.add(name + ".bias", rng.uniform(-bound, bound, cout))


def _init_linear(params, rng, name, fin, fout):
    bound = 1.0 / math.sqrt(fin)
    params.add(name + ".weight", rng.uniform(-bound, bound, (fout, fin)))
    params.add(name + ".bias", rng.uniform(-bound, bound, fout))


def _init_res(params, rng, name, cin, cout, cfg):
    _init_linear(params, rng, name + ".norm1", cfg.cond_dim, 2 * cin)
    _init_conv(params, rng, name + ".conv1", cin, cout, 3, cfg.dims)
    _init_linear(params, rng, name + ".norm2", cfg.cond_dim, 2 * cout)
    _init_conv(params, rng, name + ".conv2", cout, cout, 3, cfg.dims)
    if cin != cout:
        _init_conv(params, rng, name + ".skip", cin, cout, 1, cfg.dims)


def build_denoiser(cfg: UNetConfig, seed: int = 0) -> tuple[ParameterStore, UNet]:
    """Create parameters and the forward callable for ``cfg``.

    The final convolution is zero-initialized, so a fresh network
    outputs exactly zero.  Equal seeds give identical parameters and
    Fourier frequencies.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    fourier = rng.standard_normal(cfg.noise_embed_dim // 2) * cfg.fourier_scale
    params = ParameterStore()
    ch = cfg.channels
    _init_linear(params, rng, "embed.fc1", cfg.noise_embed_dim, cfg.cond_dim)
    _init_linear(params, rng, "embed.fc2", cfg.cond_dim, cfg.cond_dim)
    _init_conv(params, rng, "conv_in", cfg.in_channels, ch[0], 3, cfg.dims)
    c = ch[0]
    for lvl, cl in enumerate(ch):
        for r in range(cfg.res_blocks):
            _init_res(params, rng, f"down.{lvl}.res.{r}", c, cl, cfg)
            c = cl
        if lvl < len(ch) - 1:
            _init_conv(params, rng, f"down.{lvl}.downsample", c, c, 3, cfg.dims)
    _init_res(params, rng, "mid.res.0", c, c, cfg)
    if cfg.attention:
        _init_conv(params, rng, "mid.attn.qkv", c, 3 * c, 1, cfg.dims)
        _init_conv(params, rng, "mid.attn.proj", c, c, 1, cfg.dims)
    _init_res(params, rng, "mid.res.1", c, c, cfg)
    for lvl in reversed(range(len(ch))):
        for r in range(cfg.res_blocks):
            _init_res(params, rng, f"up.{lvl}.res.{r}", c + ch[lvl], ch[lvl], cfg)
            c = ch[lvl]
        if lvl > 0:
            _init_conv(params, rng, f"up.{lvl}.upsample", c, ch[lvl - 1], 3, cfg.dims)
            c = ch[lvl - 1]
    out_in = c + cfg.in_channels if cfg.input_skip else c
    _init_conv(params, rng, "conv_out", out_in, 1, 3, cfg.dims, zero=True)
    return params, UNet(cfg, params, fourier)


def param_count(params: ParameterStore) -> int:
    """Exact number of scalar parameters."""
    return params.count()
