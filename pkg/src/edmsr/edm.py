"""EDM preconditioning, noise-level sampling, loss and AdamW training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import diffgraph as dg
from .diffgraph import ParameterStore, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Preconditioner:
    sigma_data: float = 0.5

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise ValueError("sigma_data must be positive")


@dataclass(frozen=True)
class SigmaDistribution:
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError("p_std must be positive")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    grad_accum_steps: int = 8
    updates_per_epoch: int = 400
    epochs: int = 10
    patches_per_volume: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "grad_accum_steps", "updates_per_epoch", "epochs",
                     "patches_per_volume", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive")
        if self.weight_decay < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid AdamW hyperparameters")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum_steps


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def scalings(sigma, pc: Preconditioner = Preconditioner()):
    """(c_in, c_skip, c_out); well defined down to sigma = 0."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    sd2 = pc.sigma_data ** 2
    total = sigma ** 2 + sd2
    c_skip = sd2 / total
    return 1.0 / np.sqrt(total), c_skip, sigma * np.sqrt(c_skip)


def precondition_coeffs(sigma, pc: Preconditioner = Preconditioner()):
    """(c_in, c_skip, c_out, c_noise) for noise level(s) ``sigma``.

    ``sigma`` may be an array; ``c_noise`` is undefined at zero.
    """
    c_in, c_skip, c_out = scalings(sigma, pc)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("c_noise = ln(sigma)/4 is undefined for sigma <= 0")
    return c_in, c_skip, c_out, 0.25 * np.log(sigma)


def sample_sigma(dist: SigmaDistribution, rng: np.random.Generator, size=None):
    """Log-normal draw: exp(p_mean + p_std * z)."""
    return np.exp(dist.p_mean + dist.p_std * rng.standard_normal(size))


def perturb(x_hr, sigma, rng: np.random.Generator) -> np.ndarray:
    x_hr = np.asarray(x_hr, dtype=np.float64)
    return x_hr + _per_sample(sigma, x_hr.ndim) * rng.standard_normal(x_hr.shape)


def _per_sample(v, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (ndim - 1))


def denoise(net, pc: Preconditioner, x_sigma, sigma, condition) -> Tensor:
    """D(x; sigma) = c_skip x + c_out F(c_in x, c_noise, condition).

    ``sigma`` is a scalar or one value per batch element.
    """
    x_sigma = np.asarray(x_sigma.data if isinstance(x_sigma, Tensor) else x_sigma, dtype=np.float64)
    B = x_sigma.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    c_in, c_skip, c_out, c_noise = precondition_coeffs(sigma, pc)
    nd = x_sigma.ndim
    f = net(Tensor(_per_sample(c_in, nd) * x_sigma), c_noise, condition)
    return dg.add(_per_sample(c_skip, nd) * x_sigma, dg.mul(f, _per_sample(c_out, nd)))


def edm_loss_at(net, pc: Preconditioner, condition, x_hr, sigma, noise) -> Tensor:
    """Mean squared denoising error for explicit per-sample sigma and noise."""
    x_hr = np.asarray(x_hr, dtype=np.float64)
    x_sigma = x_hr + _per_sample(sigma, x_hr.ndim) * noise
    d = denoise(net, pc, x_sigma, sigma, condition)
    return dg.mean(dg.square(dg.sub(d, x_hr)))


def edm_loss(net, pc: Preconditioner, condition, x_hr, dist: SigmaDistribution,
             rng: np.random.Generator) -> Tensor:
    """Loss with one log-normal sigma per batch element and fresh noise."""
    x_hr = np.asarray(x_hr, dtype=np.float64)
    if x_hr.shape[0] == 0:
        raise ValueError("empty batch")
    sigma = sample_sigma(dist, rng, x_hr.shape[0])
    noise = rng.standard_normal(x_hr.shape)
    return edm_loss_at(net, pc, condition, x_hr, sigma, noise)


def accumulate_gradients(params: ParameterStore, net, pc: Preconditioner, micro_batches) -> float:
    """Zero grads, then backprop the mean loss over equally sized micro-batches.

    Each micro-batch is ``(condition, x_hr, sigma, noise)``.  Returns the
    mean loss value.
    """
    params.zero_grad()
    n = len(micro_batches)
    total = 0.0
    for cond, x_hr, sigma, noise in micro_batches:
        loss = edm_loss_at(net, pc, cond, x_hr, sigma, noise)
        total += float(loss.data)
        dg.backward(dg.mul(loss, 1.0 / n))
    return total / n


def adamw_step(params: ParameterStore, state: OptimizerState, cfg: TrainConfig) -> None:
    """One AdamW update using the gradients stored on ``params``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - cfg.lr * cfg.weight_decay
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


class PairSampler(Protocol):
    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (condition, x_hr) batches of size n."""


@dataclass
class TrainState:
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    update: int = 0
    rng: np.random.Generator | None = None
    best_metric: float = -math.inf
    best_params: dict | None = None


LOG_FIELDS = ("update_index", "epoch", "sigma_mean", "loss")


def train(params: ParameterStore, net, dataset: PairSampler, pc: Preconditioner,
          dist: SigmaDistribution, cfg: TrainConfig, *, state: TrainState | None = None,
          log_path=None, on_epoch_end: Callable | None = None,
          validate: Callable[[ParameterStore], float] | None = None) -> list[dict]:
    """Run ``epochs * updates_per_epoch`` AdamW updates.

    Each update averages ``grad_accum_steps`` micro-batches, each drawn
    by ``dataset.sample(rng, cfg.batch_size)``.  Resuming from ``state`` continues the update
    counter and the random stream.  Rows are appended to ``log_path``
    (CSV) as they are produced.
    """
    if getattr(dataset, "__len__", None) is not None and len(dataset) == 0:
        raise ValueError("empty dataset")
    state = state or TrainState()
    if state.rng is None:
        state.rng = np.random.default_rng(cfg.seed)
    rng = state.rng
    total = cfg.epochs * cfg.updates_per_epoch
    rows = []
    fh = writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_FIELDS)
    try:
        while state.update < total:
            micro = []
            for _ in range(cfg.grad_accum_steps):
                cond, x_hr = dataset.sample(rng, cfg.batch_size)
                sigma = sample_sigma(dist, rng, x_hr.shape[0])
                noise = rng.standard_normal(x_hr.shape)
                micro.append((cond, x_hr, sigma, noise))
            loss = accumulate_gradients(params, net, pc, micro)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at update {state.update}")
            adamw_step(params, state.optimizer, cfg)
            epoch = state.update // cfg.updates_per_epoch
            row = {
                "update_index": state.update,
                "epoch": epoch,
                "sigma_mean": float(np.mean([m[2] for m in micro])),
                "loss": loss,
            }
            rows.append(row)
            if writer:
                writer.writerow([row["update_index"], row["epoch"], repr(row["sigma_mean"]), repr(row["loss"])])
            state.update += 1
            if state.update % cfg.updates_per_epoch == 0:
                if validate is not None:
                    score = validate(params)
                    if score > state.best_metric:
                        state.best_metric = score
                        state.best_params = params.state()
                if on_epoch_end is not None:
                    on_epoch_end(epoch, state)
                log.info("epoch %d done, update %d, loss %.5f", epoch, state.update, loss)
    finally:
        if fh:
            fh.close()
    return rows


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()])
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {}
    for k in state.m:
        out["adamw.m:" + k] = state.m[k]
        out["adamw.v:" + k] = state.v[k]
    return out


def optimizer_from_arrays(arrays: dict[str, np.ndarray], t: int) -> OptimizerState:
    st = OptimizerState(t=t)
    for k, a in arrays.items():
        if k.startswith("adamw.m:"):
            st.m[k[8:]] = np.array(a)
        elif k.startswith("adamw.v:"):
            st.v[k[8:]] = np.array(a)
    return st
