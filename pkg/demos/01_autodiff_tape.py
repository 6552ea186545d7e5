"""
Gradients from the tape
=======================

The attacks and the training loop both need the gradient of a scalar loss
with respect to some inputs.  ``eadtransfer.tensor`` records operations on a
``GradientTape`` and replays their vector-Jacobian products backwards.

Run with ``python demos/01_autodiff_tape.py``; it needs no dataset.
"""

import numpy as np

from eadtransfer import models as M
from eadtransfer import tensor as T

# A tiny convolutional network in float64, so finite differences are accurate
spec = M.NetworkSpec(conv1=2, conv2=3, hidden=6)
params = {k: T.Tensor(v.astype(np.float64)) for k, v in M.init_params(spec, seed=0).items()}
x = T.Tensor(np.random.default_rng(1).random((1, 1, 28, 28)))
label = np.array([7])

# Record the forward pass and ask for the gradient with respect to the image
with T.GradientTape() as tape:
    tape.watch(x)
    loss = T.tensor_sum(T.softmax_cross_entropy(M.forward(spec, params, x), label))
grad = T.backward(tape, loss)[x].data
print(f"loss {loss.item():.6f}, gradient shape {grad.shape}")

# Compare one pixel against a central difference.  ReLU and max-pool are only
# piecewise smooth, so we first check that the nudge does not flip any unit.
pattern = M.activation_pattern(spec, params, x)
h = 1e-4
for pixel in [(0, 0, 14, 14), (0, 0, 10, 17), (0, 0, 20, 5)]:
    plus, minus = x.data.copy(), x.data.copy()
    plus[pixel] += h
    minus[pixel] -= h
    smooth = all(np.array_equal(M.activation_pattern(spec, params, p), pattern) for p in (plus, minus))

    def f(d):
        return T.tensor_sum(T.softmax_cross_entropy(M.forward(spec, params, T.Tensor(d)), label)).item()

    numeric = (f(plus) - f(minus)) / (2 * h)
    print(f"pixel {pixel[2:]}: tape {grad[pixel]: .3e}  finite difference {numeric: .3e}  smooth={smooth}")
