"""Tape-based gradients on plain numpy arrays, checked against finite differences."""
# %%
import numpy as np

from relmo import tensor as tc
from relmo.tensor import Tensor

# %% Operations are only recorded while a tape is active.
x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
with tc.Tape() as tape:
    loss = tc.sum(x * x)
tape.backward(loss)
print("d(x.x)/dx at [1, 2]:", x.grad)

# %% A small attention-like computation.
rng = np.random.default_rng(0)
q = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
k = Tensor(rng.normal(size=(4, 8)))
probe = rng.normal(size=(4, 4))


def score():
    return tc.sum(tc.softmax(tc.matmul(q, tc.transpose(k)) * (1 / np.sqrt(8))) * probe)


# %% The checker compares every gradient entry with central differences.
errs = tc.gradient_errors(score, {"q": q}, eps=1e-6)
print("max relative error for q:", errs["q"])

# %% Softmax outputs can be observed from anywhere in a forward pass.
with tc.observe_softmax() as seen:
    score()
print("row sums:", seen[0].sum(axis=-1))
