"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` are recorded; outside of
a tape they run as plain numpy computations (this is what makes finite
difference sweeps cheap). ``Tape.backward`` walks the record in exact reverse
order, accumulating gradients into every reachable ``requires_grad`` tensor.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "StochasticFunctionError",
    "backward",
    "make_rng",
    "glorot_uniform",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "sigmoid",
    "tanh",
    "gelu",
    "softmax",
    "layer_norm",
    "batch_norm",
    "dropout",
    "observe_softmax",
    "grad_check",
    "gradient_errors",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StochasticFunctionError(RuntimeError):
    """A function handed to the gradient checker is not deterministic."""


_local = threading.local()


def _state():
    st = _local.__dict__
    if "tapes" not in st:
        st["tapes"] = []
        st["softmax_observers"] = []
        st["stochastic_calls"] = 0
    return _local


class Tensor:
    """A float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run while the tape is active are
    appended in execution order, so the record is topologically sorted by
    construction.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        tapes = _state().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()
        else:  # pragma: no cover - misuse
            tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward() called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            owners.pop(id(node.out), None)
            _accumulate(node.out, g)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    owners[key] = parent
        # whatever is left are leaves (or tensors recorded on another tape)
        for key, g in grads.items():
            _accumulate(owners[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate from ``loss`` over the tape it was recorded on."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on a tape; compute it inside `with Tape():`")
    loss._tape.backward(loss)


def _active_tape() -> Tape | None:
    tapes = _state().tapes
    return tapes[-1] if tapes else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(parents), bwd))
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# RNG / init


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; one 64-bit seed reproduces everything."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product (with numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra / reductions / shape


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), bwd)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (repeated indices allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bwd)


# ---------------------------------------------------------------------------
# normalisation / attention pieces


@contextlib.contextmanager
def observe_softmax():
    """Collect every softmax output produced inside the block."""
    seen: list[np.ndarray] = []
    observers = _state().softmax_observers
    observers.append(seen)
    try:
        yield seen
    finally:
        observers.remove(seen)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    for seen in _state().softmax_observers:
        seen.append(out)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs a last axis of at least 2, got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(out, (x, gain, bias), bwd)


def batch_norm(
    x,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    axis: int = -1,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-feature normalisation over every axis except ``axis``.

    In training mode batch statistics are used and the running buffers are
    updated in place (``running = (1 - momentum) * running + momentum * stat``,
    unbiased variance). In eval mode the running buffers are used.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    axis = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gd = gain.data.reshape(bshape)
    bd = bias.data.reshape(bshape)
    xd = x.data

    if training:
        count = int(np.prod([x.shape[i] for i in red]))
        if count < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per feature")
        mu = xd.mean(axis=red, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * count / (count - 1)

        def gx_of(gx_hat):
            return inv * (
                gx_hat
                - gx_hat.mean(axis=red, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=red, keepdims=True)
            )
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv

        def gx_of(gx_hat):
            return gx_hat * inv

    out = xhat * gd + bd

    def bwd(g):
        return (
            gx_of(g * gd),
            (g * xhat).sum(axis=red).reshape(gain.shape),
            g.sum(axis=red).reshape(bias.shape),
        )

    return _make(out, (x, gain, bias), bwd)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    x = _as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    _state().stochastic_calls += 1
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# verification


def gradient_errors(
    f: Callable[[], Tensor],
    tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    eps: float = 1e-6,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per tensor.

    The error for one component is ``|analytic - numeric| / max(1, |analytic|)``.
    ``f`` must be a deterministic scalar function of the given tensors, which
    are perturbed in place.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    items = list(tensors.items() if isinstance(tensors, dict) else tensors)
    st = _state()

    saved = [(t.requires_grad, t.grad) for _, t in items]
    for _, t in items:
        t.requires_grad = True
        t.grad = None
    try:
        st.stochastic_calls = 0
        with Tape() as tape:
            loss = f()
        if st.stochastic_calls:
            raise StochasticFunctionError(
                "function is stochastic (dropout active); run it in eval mode or with dropout 0"
            )
        tape.backward(loss)
        analytic = {name: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for name, t in items}
    finally:
        for (_, t), (req, grad) in zip(items, saved):
            t.requires_grad = req
            t.grad = grad

    base = f().item()
    if f().item() != base:
        raise StochasticFunctionError("function output changed between identical calls; use eval mode")

    errors: dict[str, float] = {}
    for name, t in items:
        ga = analytic[name]
        worst = 0.0
        for idx in np.ndindex(t.shape):
            orig = t.data[idx]
            t.data[idx] = orig + eps
            fp = f().item()
            t.data[idx] = orig - eps
            fm = f().item()
            t.data[idx] = orig
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(ga[idx] - num) / max(1.0, abs(ga[idx])))
        errors[name] = worst
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative gradient error of scalar ``f`` at ``x``."""
    return gradient_errors(lambda: f(x), {"x": x}, eps)["x"]
