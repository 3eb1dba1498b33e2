"""Loss, AdamW, learning-rate schedule and the train / evaluate loops."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .data import Scene
from .metrics import HorizonReport, mpjpe, mpjpe_report, vim_average
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .tensor import Tensor

__all__ = [
    "LOSS_MODES",
    "TrainConfig",
    "TrainState",
    "NonFiniteGradientError",
    "loss",
    "loss_terms",
    "adamw_step",
    "lr_schedule",
    "decays",
    "predict",
    "train",
    "evaluate",
    "write_log_csv",
]

log = logging.getLogger(__name__)

LOSS_MODES = ("position", "velocity", "both")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    decay: float = 0.8
    decay_every: int = 10
    batch_size: int = 8
    epochs: int = 100
    max_steps: int | None = None
    loss_mode: str = "both"
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # stop once the end-of-epoch training MPJPE falls below this value
    target_mpjpe: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("decay_every, batch_size and epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    lr: float = 1e-5
    epoch_log: list[dict] = field(default_factory=list)
    step_log: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams, lr: float) -> TrainState:
        zeros = {k: np.zeros_like(t.data) for k, t in params.named_parameters()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()}, lr=lr)


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# loss


def _velocities(x, last_observed):
    """Frame differences over the horizon; frame 1 is taken relative to ``last_observed``."""
    last = np.asarray(last_observed, dtype=np.float64)[:, None]
    if isinstance(x, Tensor):
        prev = tc.concat([Tensor(last), tc.take(x, np.arange(x.shape[1] - 1), axis=1)], axis=1)
        return x - prev
    return x - np.concatenate([last, x[:, :-1]], axis=1)


def loss_terms(pred, truth, last_observed) -> tuple[Tensor, Tensor]:
    """Position and velocity terms: mean over persons, frames, joints of squared error norms."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 4:
        raise ValueError(f"loss expects matching (N, P, J, 3) shapes, got {pred.shape} and {truth.shape}")
    count = float(np.prod(truth.shape[:3]))
    d = pred - truth
    pos = tc.scale(tc.sum(d * d), 1.0 / count)
    dv = _velocities(pred, last_observed) - _velocities(truth, last_observed)
    vel = tc.scale(tc.sum(dv * dv), 1.0 / count)
    return pos, vel


def loss(pred, truth, last_observed, mode: str = "both") -> Tensor:
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}")
    pos, vel = loss_terms(pred, truth, last_observed)
    if mode == "position":
        return pos
    if mode == "velocity":
        return vel
    return pos + vel


# ---------------------------------------------------------------------------
# optimisation


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only (not biases, gains, adjacencies, decay factor)."""
    return name.endswith(".weight")


def adamw_step(
    state: TrainState,
    grads: dict[str, np.ndarray],
    *,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> TrainState:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    lr = state.lr
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, t in state.params.named_parameters():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {t.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and decays(name):
            t.data -= lr * weight_decay * t.data
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def lr_schedule(epoch: int, lr0: float, decay: float = 0.8, every: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 * decay ** (epoch // every)


# ---------------------------------------------------------------------------
# loops


def _check_dims(scenes: Sequence[Scene], config: ModelConfig) -> None:
    if not scenes:
        raise ValueError("dataset is empty")
    for s in scenes:
        config.check_scene(s)


def predict(scenes: Sequence[Scene], params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Eval-mode predictions, ``(S, N, P, J, 3)``."""
    _check_dims(scenes, config)
    return np.concatenate([forward_batch([s], params, config, training=False).data for s in scenes])


def evaluate(
    scenes: Sequence[Scene],
    params: ModelParams,
    config: ModelConfig,
    horizons: Sequence[int] | None = None,
) -> dict:
    """Eval-mode metrics over a dataset; persons of all scenes are pooled."""
    preds = predict(scenes, params, config)
    truth = np.stack([s.future for s in scenes])
    return metrics_from_predictions(preds, truth, horizons)


def metrics_from_predictions(preds: np.ndarray, truth: np.ndarray, horizons: Sequence[int] | None = None) -> dict:
    s, n, p, j, _ = preds.shape
    pooled_pred = preds.reshape(s * n, p, j, 3)
    pooled_truth = truth.reshape(s * n, p, j, 3)
    horizons = list(range(1, p + 1)) if horizons is None else [int(h) for h in horizons]
    vim: HorizonReport = vim_average(pooled_pred, pooled_truth, horizons)
    return {
        "mpjpe": mpjpe(pooled_pred, pooled_truth),
        "mpjpe_report": mpjpe_report(pooled_pred, pooled_truth, horizons),
        "vim": vim,
        "vim_avg": vim.average,
    }


def train(
    scenes: Sequence[Scene],
    config: ModelConfig,
    tcfg: TrainConfig,
    params: ModelParams | None = None,
) -> TrainState:
    """Seeded training loop; returns the final state with per-epoch and per-step logs.

    Each step runs one batch of ``batch_size`` scenes through the network
    jointly (the last batch of an epoch may be smaller); the loss is the mean
    over all persons of the batch.
    """
    _check_dims(scenes, config)
    if params is None:
        params = init_params(config, tcfg.seed)
    state = TrainState.fresh(params, tcfg.lr)
    order_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 1]))
    drop_rng = tc.make_rng(tcfg.seed + 2)

    for epoch in range(tcfg.epochs):
        state.epoch = epoch
        state.lr = lr_schedule(epoch, tcfg.lr, tcfg.decay, tcfg.decay_every)
        order = order_rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            if tcfg.max_steps is not None and state.step >= tcfg.max_steps:
                break
            batch = [scenes[i] for i in order[start : start + tcfg.batch_size]]
            truth = np.concatenate([s.future for s in batch])
            last = np.concatenate([s.last_observed for s in batch])
            params.zero_grad()
            with tc.Tape() as tape:
                pred = forward_batch(batch, params, config, training=True, rng=drop_rng)
                pred = tc.reshape(pred, truth.shape)
                total = loss(pred, truth, last, tcfg.loss_mode)
            tape.backward(total)
            grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in params.named_parameters()}
            pos, vel = loss_terms(Tensor(pred.data), truth, last)
            batch_loss, batch_pos, batch_vel = total.item(), pos.item(), vel.item()
            adamw_step(
                state,
                grads,
                beta1=tcfg.beta1,
                beta2=tcfg.beta2,
                eps=tcfg.eps,
                weight_decay=tcfg.weight_decay,
            )
            losses.append(batch_loss)
            state.step_log.append(
                {"step": state.step, "loss": batch_loss, "loss_position": batch_pos, "loss_velocity": batch_vel}
            )
        if not losses:
            break
        metrics = evaluate(scenes, params, config)
        row = {
            "epoch": epoch,
            "step": state.step,
            "lr": state.lr,
            "train_loss": float(np.mean(losses)),
            "mpjpe": metrics["mpjpe"],
            "vim_avg": metrics["vim_avg"],
        }
        state.epoch_log.append(row)
        log.debug("epoch %d lr %.3g loss %.6g mpjpe %.6g", epoch, state.lr, row["train_loss"], row["mpjpe"])
        if tcfg.target_mpjpe is not None and row["mpjpe"] < tcfg.target_mpjpe:
            break
    params.zero_grad()
    return state


LOG_FIELDS = ("epoch", "lr", "train_loss", "mpjpe", "vim_avg")


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
