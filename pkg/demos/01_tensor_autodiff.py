#!/usr/bin/env python3
"""Walkthrough: the tensor core, gradient checking, and the Adam step.

Builds a small computation, compares analytic gradients against central
finite differences, and minimizes a quadratic bowl.
"""

import numpy as np

from fsdt.tensor import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    matmul,
    parameter,
    relu,
    reset_tape,
    reshape,
    mul,
)

rng = np.random.default_rng(0)

print("== analytic vs finite-difference gradients ==")
w = parameter(rng.normal(size=(4, 3)))
x = Tensor(rng.normal(size=(2, 4)))


def loss_value() -> float:
    reset_tape()
    h = relu(matmul(x, w))
    total = matmul(matmul(Tensor(np.ones((1, 2))), h), Tensor(np.ones((3, 1))))
    return total


loss = loss_value()
backward(loss)
analytic = w.grad.copy()
w.grad = None

h_step = 1e-6
numeric = np.zeros_like(w.data)
flat = w.data.reshape(-1)
num_flat = numeric.reshape(-1)
for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + h_step
    up = loss_value().item()
    flat[i] = orig - h_step
    down = loss_value().item()
    flat[i] = orig
    num_flat[i] = (up - down) / (2 * h_step)

print("max |analytic - numeric| =", np.max(np.abs(analytic - numeric)))

print()
print("== Adam on a quadratic bowl ==")
p = parameter(np.array([3.0, -2.0]))
state = AdamState()
for step in range(200):
    reset_tape()
    sq = reshape(mul(p, p), (1, 2))
    bowl = matmul(sq, Tensor(np.ones((2, 1))))
    backward(bowl)
    adam_step([p], state, lr=0.05)
    if step % 50 == 0:
        print(f"step {step:3d}  x = {p.data}")
print("final:", p.data, "(should be near the origin)")
