"""Adam on plain numpy arrays (shared by training and the C&W attack)."""

import numpy as np


class Adam:
    """Adam with bias correction.

    ``lr`` may be a scalar or an array broadcastable to the parameters, which
    lets the attacks keep one optimizer state per example in a batch.
    """

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s, dtype=dtype) for s in shapes]
        self.v = [np.zeros(s, dtype=dtype) for s in shapes]

    def step(self, params, grads):
        """Return updated copies of ``params`` given ``grads``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            out.append((p - update).astype(p.dtype))
        return out

    def select(self, rows):
        """Keep only the given leading-axis rows of every moment buffer."""
        self.m = [m[rows] for m in self.m]
        self.v = [v[rows] for v in self.v]
