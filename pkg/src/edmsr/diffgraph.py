"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the primitives the U-Net denoisers need are provided: N-d
convolution (3x3 / 3x3x3, optional stride 2), nearest upsampling,
linear layers, SiLU, group normalization, scale/shift modulation,
scaled dot-product attention, channel concatenation and elementwise
arithmetic.  The graph is rebuilt on every forward pass (tape style)
and released by :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GraphError",
    "ParameterStore",
    "no_grad",
    "set_debug",
    "backward",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
]


class GraphError(RuntimeError):
    """Raised for misuse of the autodiff graph (shape errors, double backward)."""


_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g),))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    return _make(data, tuple(tensors), bw)


def silu(a: Tensor) -> Tensor:
    sig = expit(a.data)
    out = a.data * sig

    def bw(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape (B, in) and ``w`` of shape (out, in)."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[1]:
        raise GraphError(f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """``x * (1 + scale) + shift`` with per-(batch, channel) scale and shift."""
    expand = (slice(None), slice(None)) + (None,) * (x.ndim - 2)
    s = scale.data[expand]
    t = shift.data[expand]
    spatial = tuple(range(2, x.ndim))

    def bw(g):
        return g * (1.0 + s), (g * x.data).sum(axis=spatial), g.sum(axis=spatial)

    return _make(x.data * (1.0 + s) + t, (x, scale, shift), bw)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization without affine parameters."""
    B, C = x.shape[:2]
    if C % groups:
        raise GraphError(f"group_norm: {groups} groups do not divide {C} channels")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv

    def bw(g):
        gg = g.reshape(B, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape),)

    return _make(xhat.reshape(x.shape), (x,), bw)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over tensors shaped (B, heads, T, d)."""
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return _make(out, (q, k, v), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data
    nd = x.ndim - 2
    for ax in range(2, x.ndim):
        out = np.repeat(out, factor, axis=ax)

    def bw(g):
        shape = list(x.shape[:2])
        for n in x.shape[2:]:
            shape += [n, factor]
        return (g.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return _make(out, (x,), bw)


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """N-d cross-correlation with 'same' zero padding (k // 2).

    ``x``: (B, C, *S); ``w``: (O, C, k, ..., k).  With ``stride=2`` the
    spatial extent is ceil(S / 2).
    """
    nd = x.ndim - 2
    if w.ndim != nd + 2 or w.shape[1] != x.shape[1]:
        raise GraphError(f"conv: weight {w.shape} incompatible with input {x.shape}")
    k = w.shape[2]
    pad = k // 2
    B, C = x.shape[:2]
    O = w.shape[0]
    spatial = x.shape[2:]
    out_sp = tuple((n + 2 * pad - k) // stride + 1 for n in spatial)
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x.data
    offsets = list(itertools.product(range(k), repeat=nd))
    K = len(offsets)

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp))

    cols = np.empty((B, C, K) + out_sp)
    for j, off in enumerate(offsets):
        cols[:, :, j] = xp[window(off)]
    cols = cols.reshape(B, C * K, -1)
    wm = w.data.reshape(O, C * K)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape((B, O) + out_sp)

    def bw(g):
        g2 = g.reshape(B, O, -1)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(wm.T, g2).reshape((B, C, K) + out_sp)
        gxp = np.zeros(xp.shape)
        for j, off in enumerate(offsets):
            gxp[window(off)] += gcols[:, :, j]
        gx = gxp
        if pad:
            gx = gxp[(slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in spatial)]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate (``+=``) so micro-batch accumulation works;
    clear them with :meth:`ParameterStore.zero_grad`.  The graph is
    released afterwards and a second call on the same loss raises.
    """
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; re-run forward first")
    if loss.data.size != 1:
        raise GraphError("backward expects a scalar loss")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Ordered, uniquely named trainable tensors."""

    def __init__(self):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = np.zeros_like(t.data)

    def count(self) -> int:
        return int(sum(t.data.size for t in self._tensors.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)[:5]}")
        for k, t in self._tensors.items():
            if state[k].shape != t.shape:
                raise GraphError(f"shape mismatch for {k}: {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst_name: str
    passed: bool


def grad_check(closure, params: ParameterStore, n_coords: int = 100, h: float = 1e-5,
               tolerance: float = 1e-4, seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic and central-difference gradients.

    ``closure()`` must build a fresh graph and return a scalar Tensor.
    Coordinates are drawn uniformly over all scalar parameters.  The
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params.zero_grad()
    backward(closure())
    names = list(params)
    sizes = np.array([params[n].data.size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst, worst_name = 0.0, ""
    with no_grad():
        for f in flat:
            i = int(np.searchsorted(bounds, f, side="right"))
            name = names[i]
            j = int(f - (bounds[i] - sizes[i]))
            t = params[name]
            flat_view = t.data.reshape(-1)
            orig = flat_view[j]
            flat_view[j] = orig + h
            fp = float(closure().data)
            flat_view[j] = orig - h
            fm = float(closure().data)
            flat_view[j] = orig
            numeric = (fp - fm) / (2 * h)
            analytic = float(t.grad.reshape(-1)[j])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            if err > worst:
                worst, worst_name = err, f"{name}[{j}]"
    return GradCheckReport(worst, len(flat), worst_name, worst < tolerance)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (little-endian):
#   8s  magic "EDMSRCKP"
#   u32 format version
#   u32 metadata length, followed by UTF-8 JSON metadata
#   u32 record count, then per record:
#       u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
#       prod(dims) x f64 values

CHECKPOINT_MAGIC = b"EDMSRCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an edmsr checkpoint")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = OrderedDict()
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return arrays, meta
