"""Latent-prediction losses, RMSprop, and the per-sequence training step.

Three losses are minimised, each by its own RMSprop instance:

* prediction -- mean squared error between T(z_j) and z_{j+1};
* dissimilarity -- mean of exp(-|z_j - z_{j+1}| / sigma), pushing
  consecutive codes apart;
* bound -- max(max_j z_j^2 - 1, 0), keeping codes in [-1, 1].

All three gradients are taken at the same (pre-update) parameters and then
applied in the fixed order pred -> dis -> bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams, encode_batch, predict_batch

SIGMA = 0.2
LEARNING_RATE = 3e-4
DIS_LR_RATIO = 0.7
RHO = 0.9
EPSILON = 1e-8
_CHUNK = 16384  # elements per RMSprop slice; keeps the update passes inside L2
LOSS_NAMES = ("pred", "dis", "bound")


class TrainingDiverged(ArithmeticError):
    """A loss became NaN or infinite."""


def _vec(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_pred(z, tz) -> Tensor:
    """Mean over pairs of (T(z_j) - z_{j+1})^2; ``tz[j]`` must equal T(z[j])."""
    z, tz = _vec(z), _vec(tz)
    if z.data.ndim != 1 or tz.shape != (z.shape[0] - 1,):
        raise ValueError(f"loss_pred: need len(tz) == len(z) - 1, got {tz.shape} and {z.shape}")
    return ad.mean(ad.square(ad.sub(tz, z[1:])))


def loss_dis(z, sigma: float = SIGMA) -> Tensor:
    z = _vec(z)
    if z.data.ndim != 1 or z.shape[0] < 2:
        raise ValueError(f"loss_dis: need at least two codes, got shape {z.shape}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gap = ad.abs(ad.sub(z[:-1], z[1:]))
    return ad.mean(ad.exp(ad.mul(gap, -1.0 / sigma)))


def loss_bound(z) -> Tensor:
    z = _vec(z)
    if z.size < 1:
        raise ValueError("loss_bound: empty code list")
    return ad.relu(ad.sub(ad.reduce_max(ad.square(z)), 1.0))


@dataclass(frozen=True)
class LossValues:
    pred: float
    dis: float
    bound: float

    def as_tuple(self) -> tuple[float, float, float]:
        return self.pred, self.dis, self.bound

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())


@dataclass
class RmspropState:
    """v <- rho v + (1 - rho) g^2;  p <- p - lr g / (sqrt(v) + eps)."""

    lr: float
    rho: float = RHO
    eps: float = EPSILON
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name].data
            dt = p.dtype.type
            v = self.v.get(name)
            if v is None:
                v = self.v[name] = np.zeros_like(p)
            if not g.any():
                # zero gradient: only the running average decays
                np.multiply(v, dt(self.rho), out=v)
                continue
            if p.flags.c_contiguous and v.flags.c_contiguous and p.size > _CHUNK:
                # large tensors: walk cache-sized slices so the passes below stay in cache
                pf, gf, vf = p.reshape(-1), np.ascontiguousarray(g).reshape(-1), v.reshape(-1)
                buf = np.empty(_CHUNK, dtype=p.dtype)
                for s in range(0, pf.size, _CHUNK):
                    e = min(s + _CHUNK, pf.size)
                    self._update(pf[s:e], gf[s:e], vf[s:e], buf[: e - s], dt)
            else:
                self._update(p, g, v, np.empty_like(p), dt)

    def _update(self, p, g, v, buf, dt) -> None:
        np.multiply(g, g, out=buf)
        np.multiply(buf, dt(1.0 - self.rho), out=buf)
        np.multiply(v, dt(self.rho), out=v)
        np.add(v, buf, out=v)
        np.sqrt(v, out=buf)
        np.add(buf, dt(self.eps), out=buf)
        np.divide(g, buf, out=buf)
        np.multiply(buf, dt(self.lr), out=buf)
        np.subtract(p, buf, out=p)


def rmsprop_step(state: RmspropState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
    state.step(params, grads)
    return params


@dataclass(frozen=True)
class TrainConfig:
    sigma: float = SIGMA
    lr: float = LEARNING_RATE
    dis_ratio: float = DIS_LR_RATIO
    lr_bound: float = LEARNING_RATE
    rho: float = RHO
    eps: float = EPSILON

    @property
    def lr_dis(self) -> float:
        return self.dis_ratio * self.lr


@dataclass
class TrainState:
    pred: RmspropState
    dis: RmspropState
    bound: RmspropState
    sigma: float = SIGMA
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig | None = None) -> "TrainState":
        c = config or TrainConfig()
        return cls(
            pred=RmspropState(c.lr, c.rho, c.eps),
            dis=RmspropState(c.lr_dis, c.rho, c.eps),
            bound=RmspropState(c.lr_bound, c.rho, c.eps),
            sigma=c.sigma,
        )

    def optimizers(self) -> tuple[RmspropState, RmspropState, RmspropState]:
        return self.pred, self.dis, self.bound


@dataclass
class StepGradients:
    """Per-loss gradients at one parameter point, plus the codes that produced them."""

    losses: LossValues
    grads: tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, np.ndarray]]
    codes: np.ndarray
    last_prediction: float


def compute_gradients(params: ModelParams, tiles, sigma: float = SIGMA, fused: bool = True) -> StepGradients:
    """Forward the sequence and differentiate each loss separately.

    The prediction loss reaches encoder and predictor; the dissimilarity and
    bound losses reach only the encoder. With ``fused`` the three encoder
    gradients come from a single sample-weighted reverse pass; otherwise
    three ordinary passes are run over one tape (reference path).
    """
    tiles = np.asarray(tiles)
    if tiles.ndim != 3 or tiles.shape[0] < 2:
        raise ValueError(f"need a (t, H, W) stack with t >= 2, got {tiles.shape}")
    enc_names = list(params.encoder)
    pred_names = list(params.predictor)
    params.zero_grad()  # leftovers from a caller's own backward would leak in

    if fused:
        with ad.Tape() as enc_tape:
            z = encode_batch(params, tiles)
        codes = z.detach(requires_grad=True)
        with ad.Tape() as head:
            tz = predict_batch(params, codes[:-1])
            losses = (loss_pred(codes, tz), loss_dis(codes, sigma), loss_bound(codes))
        values = LossValues(*(l.item() for l in losses))
        _check_finite(values)
        last_pred = float(predict_batch(params, codes.detach()[-1:]).data[0])

        seeds = []
        head_grads = {}
        for loss in losses:
            codes.grad = None
            head.backward(loss)
            seeds.append(np.zeros(codes.shape, codes.dtype) if codes.grad is None else codes.grad)
            if not head_grads:
                head_grads = {n: params[n].grad for n in pred_names}
                for n in pred_names:
                    params[n].grad = None
        # an all-zero seed (e.g. an inactive bound loss) has an all-zero gradient;
        # leaving it out of the weighted pass saves a third of the encoder backward
        active = [k for k, s in enumerate(seeds) if s.any()]
        per_loss = tuple({n: np.zeros_like(params[n].data) for n in enc_names} for _ in range(3))
        if active:
            enc_tape.backward(z, sample_weights=np.stack([seeds[k] for k in active]))
            for row, k in enumerate(active):
                per_loss[k].update({n: params[n].grad[row] for n in enc_names if params[n].grad is not None})
        per_loss[0].update({n: g if g is not None else np.zeros_like(params[n].data) for n, g in head_grads.items()})
        params.zero_grad()
        return StepGradients(values, per_loss, z.data.copy(), last_pred)

    with ad.Tape() as tape:
        z = encode_batch(params, tiles)
        tz = predict_batch(params, z[:-1])
        losses = (loss_pred(z, tz), loss_dis(z, sigma), loss_bound(z))
    values = LossValues(*(l.item() for l in losses))
    _check_finite(values)
    last_pred = float(predict_batch(params, z.detach()[-1:]).data[0])
    reach = (enc_names + pred_names, enc_names, enc_names)
    per_loss = []
    for loss, names in zip(losses, reach):
        params.zero_grad()
        tape.backward(loss)
        per_loss.append({n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in names})
    params.zero_grad()
    return StepGradients(values, tuple(per_loss), z.data.copy(), last_pred)


def _check_finite(values: LossValues) -> None:
    if not values.finite():
        raise TrainingDiverged(f"non-finite loss: pred={values.pred} dis={values.dis} bound={values.bound}")


def apply_updates(params: ModelParams, state: TrainState, grads: StepGradients) -> None:
    for opt, g in zip(state.optimizers(), grads.grads):
        opt.step(params.tensors, g)
    state.step += 1


def train_step(params: ModelParams, state: TrainState, tiles, fused: bool = True) -> LossValues:
    """One optimisation step on the t-1 consecutive pairs of ``tiles``.

    Returns the loss values measured before the update.
    """
    grads = compute_gradients(params, tiles, state.sigma, fused=fused)
    apply_updates(params, state, grads)
    return grads.losses


LOSS_TRACE_HEADER = ("step", "loss_pred", "loss_dis", "loss_bound")


def write_loss_trace(path: str | Path, losses: Iterable[LossValues], start: int = 1) -> None:
    """CSV with one row per optimisation step (6 significant digits)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_TRACE_HEADER)
        for i, lv in enumerate(losses, start=start):
            w.writerow([i, *(f"{v:.6g}" for v in lv.as_tuple())])
