"""
A tiny reverse-mode autodiff engine
===================================

Everything the detector learns flows through ``tooldet.tensor``: a handful of
numpy-backed ops that record themselves on a tape, and a ``backward`` that
walks the tape in reverse.
"""

import numpy as np

from tooldet import tensor as T

rng = np.random.default_rng(0)

# %%
# Build a small graph: conv -> relu -> max-pool -> linear -> softmax.
# Leaves that want gradients say so up front.

x = T.tensor(rng.normal(size=(1, 3, 16, 16)))
k = T.tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
b = T.tensor(np.zeros(4), requires_grad=True)
w = T.tensor(rng.normal(size=(4 * 4 * 4, 2)) * 0.1, requires_grad=True)
c = T.tensor(np.zeros(2), requires_grad=True)

h = T.max_pool(T.relu(T.conv2d(x, k, b, stride=2, pad=1)), 2)
print("feature map", h.shape)
probs = T.softmax(T.linear(T.reshape(h, (1, -1)), w, c))
print("class probabilities", probs.data)

# %%
# A scalar loss, then one call fills ``.grad`` on every leaf.

loss = T.scale(T.sum_all(T.mul(T.log_softmax(T.linear(T.reshape(h, (1, -1)), w, c)), np.array([[1.0, 0.0]]))), -1.0)
T.backward(loss)
print("d loss / d kernel has norm", np.linalg.norm(k.grad))

# %%
# Gradient checks compare against central differences and need 64-bit mode,
# which is a global switch rather than a per-tensor dtype.

with T.precision(64):
    x64 = T.tensor(rng.normal(size=(2, 3, 7, 7)))
    k64 = T.tensor(rng.normal(size=(4, 3, 3, 3)))
    b64 = T.tensor(rng.normal(size=4))
    weights = rng.normal(size=(2, 4, 4, 4))
    err = T.grad_check(lambda x, k, b: T.sum_all(T.mul(T.conv2d(x, k, b, stride=2, pad=1), weights)),
                       [x64, k64, b64])
print(f"worst relative error of the conv gradient: {err:.2e}")

# %%
# Non-finite values are caught where they appear instead of poisoning the
# weights silently.

try:
    T.scale(T.tensor(np.array([1e30, 1.0])), 1e30)  # overflows float32
except T.NonFiniteError as exc:
    print("caught:", exc)
