"""Tour of the tensor core: volumetric ops and reverse-mode gradients.

Builds a small conv -> group norm -> tanh pipeline, runs backward, and
verifies one gradient entry against a central finite difference.
"""

import numpy as np

from slabgan import tensor as T
from slabgan.tensor import Tensor

rng = np.random.default_rng(0)

# forward: a two-channel 8^3 volume through conv / norm / tanh
x = Tensor(rng.standard_normal((2, 8, 8, 8)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2, 3, 3, 3)) * 0.3, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)

h = T.conv3d(x, w, b, stride=1, pad=1)
h = T.group_norm(h, 2, gamma, beta)
loss = T.tmean(T.square(T.tanh(h)))
print(f"loss = {loss.item():.6f}")
print(f"tape length before backward: {len(T.active_tape())}")

T.backward(loss)
print(f"tape length after backward:  {len(T.active_tape())} (consumed)")
print(f"|grad x| max = {np.abs(x.grad).max():.5f}, |grad w| max = {np.abs(w.grad).max():.5f}")

# check one weight gradient against central differences
idx = (1, 0, 1, 1, 1)
h_step = 1e-5
analytic = w.grad[idx]


def loss_at(delta):
    w2 = Tensor(w.data.copy())
    w2.data[idx] += delta
    out = T.group_norm(T.conv3d(Tensor(x.data), w2, Tensor(b.data), 1, 1),
                       2, Tensor(gamma.data), Tensor(beta.data))
    return float(T.tmean(T.square(T.tanh(out))).data)


numeric = (loss_at(h_step) - loss_at(-h_step)) / (2 * h_step)
print(f"analytic dL/dw{idx} = {analytic:.10f}")
print(f"numeric  dL/dw{idx} = {numeric:.10f}")
assert abs(analytic - numeric) < 1e-7

# gradients accumulate across reuses of the same tensor
t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
T.backward(T.add(T.tsum(T.square(t)), T.tsum(T.mul(t, 3.0))))
print(f"accumulated gradient of x^2 + 3x at [1, 2]: {t.grad} (expected [5, 7])")

# no-grad mode: nothing is taped, nothing retained
with T.no_grad():
    silent = T.conv3d(Tensor(rng.standard_normal((1, 4, 4, 4))),
                      Tensor(rng.standard_normal((1, 1, 3, 3, 3))),
                      Tensor(np.zeros(1)), 1, 1)
print(f"inference op requires_grad: {silent.requires_grad}, tape: {len(T.active_tape())}")
