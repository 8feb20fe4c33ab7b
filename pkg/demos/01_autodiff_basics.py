"""A walk through the reverse-mode engine that powers all training here.

Tensors wrap float64 numpy arrays. Operations record their parents and a
local-gradient closure on a tape; ``backward`` replays the tape in reverse
topological order and accumulates gradients. Everything below prints what
it computes, and the last section checks a gradient against central finite
differences -- the same referee the test suite uses.

Run:  python3 demos/01_autodiff_basics.py
"""
from __future__ import annotations

import numpy as np

from auxstep import autodiff as ad

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
print("== a scalar chain ==")
x = ad.Tensor(np.array(1.5), requires_grad=True)
y = ad.mul_scalar(ad.sigmoid(x), 4.0)      # y = 4 * sigmoid(x)
ad.backward(y)
print(f"y = 4*sigmoid(1.5) = {float(y.data):.6f}")
print(f"dy/dx = 4*sigmoid'(1.5) = {float(x.grad):.6f}")
expected = 4.0 * float(y.data) / 4.0 * (1.0 - float(y.data) / 4.0)
print(f"hand-computed        = {expected:.6f}")

# ---------------------------------------------------------------------------
print("\n== gradients accumulate across shared inputs ==")
w = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
ad.backward(ad.sum_axes(ad.add(ad.mul(w, w), w), (0,)))  # sum(w^2 + w)
print(f"d/dw sum(w^2 + w) at {w.data} -> {w.grad}  (expect 2w + 1)")

# ---------------------------------------------------------------------------
print("\n== the ops the depth model is built from ==")
images = ad.Tensor(rng.normal(size=(2, 4, 4, 8)))  # channels-last tokens
weight = ad.Tensor(rng.normal(size=(6, 8)) * 0.3, requires_grad=True)
bias = ad.Tensor(np.zeros(6), requires_grad=True)
h = ad.relu(ad.channel_affine(weight, images, bias))   # per-position affine
h = ad.upsample2x(h, axes=(1, 2))                      # nearest-neighbour 2x
h = ad.permute(h, (0, 3, 1, 2))                        # to channels-first
print(f"tokens (2,4,4,8) -> affine+relu+upsample -> {h.data.shape}")
loss = ad.mean_axes(ad.mul(h, h), (0, 1, 2, 3))
ad.backward(loss)
print(f"loss = mean(h^2) = {float(loss.data):.6f}; "
      f"|dL/dweight| max = {np.abs(weight.grad).max():.6f}")

# ---------------------------------------------------------------------------
print("\n== checking against central finite differences ==")


def f(values: np.ndarray) -> float:
    t = ad.Tensor(values)
    return float(ad.sum_axes(ad.softplus(ad.mul(t, t)), (0,)).data)


point = rng.normal(size=5)
t = ad.Tensor(point.copy(), requires_grad=True)
ad.backward(ad.sum_axes(ad.softplus(ad.mul(t, t)), (0,)))
numeric = ad.finite_difference_grad(f, point, epsilon=1e-4)
print(f"backward: {np.array2string(t.grad, precision=6)}")
print(f"numeric:  {np.array2string(numeric, precision=6)}")
print(f"max abs difference: {np.abs(t.grad - numeric).max():.2e}")

# ---------------------------------------------------------------------------
print("\n== no_grad for inference ==")
with ad.no_grad():
    silent = ad.relu(ad.mul(w, w))
print(f"inside no_grad, results carry no tape: parents={silent._parents}")
