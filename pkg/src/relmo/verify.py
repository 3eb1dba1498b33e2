"""Finite-difference gradient checks for the primitive ops and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .data import SyntheticConfig, generate_scenes
from .model import ModelConfig, forward_batch, init_params
from .tensor import Tensor

__all__ = ["GradReport", "op_gradient_errors", "model_gradient_errors", "run_gradcheck", "THRESHOLD"]

THRESHOLD = 1e-4


@dataclass
class GradReport:
    ops: dict[str, float] = field(default_factory=dict)
    params: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def modules(self) -> dict[str, float]:
        """Worst parameter error grouped by top-level module name."""
        out: dict[str, float] = {}
        for name, err in self.params.items():
            mod = name.split(".", 1)[0]
            out[mod] = max(out.get(mod, 0.0), err)
        return out

    def failures(self, threshold: float = THRESHOLD) -> list[tuple[str, float]]:
        bad = [(f"op {k}", v) for k, v in self.ops.items() if not v < threshold]
        bad += [(f"parameter {k}", v) for k, v in self.params.items() if not v < threshold]
        return sorted(bad, key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)

    @property
    def max_error(self) -> float:
        vals = list(self.ops.values()) + list(self.params.values())
        return max(vals) if vals else 0.0


def _op_cases(rng: np.random.Generator):
    """(name, function of the inputs, inputs) for every differentiable primitive."""

    def r(*shape):
        return Tensor(rng.normal(size=shape))

    w = r(4, 3)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    gain, bias = r(4), r(4)
    rm, rv = np.zeros(3), np.ones(3)
    return [
        ("add", lambda a, b: tc.add(a, b), [r(3, 4), r(4)]),
        ("sub", lambda a, b: tc.sub(a, b), [r(3, 4), r(3, 1)]),
        ("mul", lambda a, b: tc.mul(a, b), [r(3, 4), r(3, 4)]),
        ("div", lambda a, b: tc.div(a, b), [r(3, 4), pos]),
        ("neg", lambda a: tc.neg(a), [r(3, 4)]),
        ("scale", lambda a: tc.scale(a, 0.7), [r(3, 4)]),
        ("sigmoid", lambda a: tc.sigmoid(a), [r(3, 4)]),
        ("tanh", lambda a: tc.tanh(a), [r(3, 4)]),
        ("gelu", lambda a: tc.gelu(a), [r(3, 4)]),
        ("matmul", lambda a, b: tc.matmul(a, b), [r(2, 3, 4), w]),
        ("sum", lambda a: tc.sum(a, axis=1), [r(3, 4)]),
        ("mean", lambda a: tc.mean(a, axis=0, keepdims=True), [r(3, 4)]),
        ("reshape", lambda a: tc.reshape(a, (4, 3)), [r(3, 4)]),
        ("transpose", lambda a: tc.transpose(a, (1, 0)), [r(3, 4)]),
        ("concat", lambda a, b: tc.concat([a, b], axis=0), [r(3, 4), r(2, 4)]),
        ("take", lambda a: tc.take(a, np.array([0, 2, 2]), axis=0), [r(3, 4)]),
        ("softmax", lambda a: tc.softmax(a, axis=-1), [r(3, 4)]),
        ("layer_norm", lambda a, g, b: tc.layer_norm(a, g, b), [r(3, 4), gain, bias]),
        (
            "batch_norm",
            lambda a, g, b: tc.batch_norm(a, g, b, rm.copy(), rv.copy(), training=True, axis=1),
            [r(2, 3, 4), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))],
        ),
    ]


def op_gradient_errors(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Worst relative gradient error of each primitive under a random linear readout."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn, inputs in _op_cases(rng):
        probe = rng.normal(size=fn(*inputs).shape)

        def f(fn=fn, inputs=inputs, probe=probe):
            return tc.sum(fn(*inputs) * probe)

        errs = tc.gradient_errors(f, [(str(i), t) for i, t in enumerate(inputs)], eps)
        out[name] = max(errs.values())
    return out


def model_gradient_errors(config: ModelConfig, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Per-parameter gradient error of the training loss on two synthetic scenes.

    Training mode is used so batch-norm runs on batch statistics; dropout must be off.
    """
    from .training import loss

    if config.dropout > 0:
        raise ValueError("gradient check needs dropout 0: dropout makes the loss stochastic")
    params = init_params(config, seed)
    # perturb the zero-initialised decoder so gradients reach every upstream block
    rng = np.random.default_rng(seed)
    for name, t in params.named_parameters():
        if name.startswith("decoder"):
            t.data[...] = rng.normal(scale=0.1, size=t.shape)
    scenes = generate_scenes(
        2, SyntheticConfig(N=config.N, T=config.T, P=config.P, J=config.J, seed=seed, interaction_strength=0.5)
    )
    truth = np.concatenate([s.future for s in scenes])
    last = np.concatenate([s.last_observed for s in scenes])
    buffers = {k: v.copy() for k, v in params.buffers.items()}

    def f():
        # batch-norm updates running statistics in training mode; reset them so
        # every evaluation sees the same state
        for k, v in buffers.items():
            params.buffers[k][...] = v
        pred = tc.reshape(forward_batch(scenes, params, config, training=True), truth.shape)
        return loss(pred, truth, last, "both")

    return tc.gradient_errors(f, params.named_parameters(), eps)


def run_gradcheck(config: ModelConfig | None = None, seed: int = 0, eps: float = 1e-5) -> GradReport:
    config = ModelConfig.toy() if config is None else config
    if config.dropout > 0:
        raise ValueError("gradient check needs dropout 0: dropout makes the loss stochastic")
    start = time.perf_counter()
    report = GradReport(ops=op_gradient_errors(seed), params=model_gradient_errors(config, seed, eps))
    report.seconds = time.perf_counter() - start
    return report
