import numpy as np

from eadtransfer import tensor as T
from eadtransfer.tensor import Tensor


class LinearModel:
    """logits = flatten(x) @ W + b; a cheap stand-in for the CNN in attack tests."""

    def __init__(self, seed=0, scale=1.0, features=784, classes=10):
        g = np.random.default_rng(seed)
        self.w = Tensor((g.standard_normal((features, classes)) * scale).astype(np.float32))
        self.b = Tensor(np.zeros(classes, dtype=np.float32))

    def logits(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        out = T.add_bias(T.matmul(T.flatten(x), self.w), self.b)
        return T.reshape(out, (out.shape[1],)) if single else out

    def predict(self, x):
        return self.logits(np.asarray(x, dtype=np.float32)).data.argmax(axis=1)


def random_images(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 28, 28)).astype(np.float32)


# Published transfer results for the ensemble-crafted examples, as typeset:
# (attack, confidence, targeted ASR/L1/L2/Linf, non-targeted ASR/L1/L2/Linf)
TABLE1 = [
    ("PGD", None, 68.5, 188.3, 8.947, 0.6, 99.9, 270.5, 13.27, 0.8),
    ("I-FGM", None, 75.1, 144.5, 7.406, 0.915, 99.8, 199.4, 10.66, 0.9),
    ("C&W", 10, 1.1, 34.15, 2.482, 0.548, 4.9, 23.23, 1.702, 0.424),
    ("C&W", 30, 69.4, 68.14, 4.864, 0.871, 71.3, 51.04, 3.698, 0.756),
    ("C&W", 50, 92.9, 117.45, 8.041, 0.987, 99.1, 78.65, 5.598, 0.937),
    ("C&W", 70, 34.8, 169.7, 10.88, 0.994, 99, 119.4, 8.097, 0.99),
    ("EAD", 10, 27.4, 25.79, 3.209, 0.876, 39.9, 19.19, 2.636, 0.8),
    ("EAD", 30, 85.8, 49.64, 5.179, 0.995, 94.5, 34.28, 4.192, 0.971),
    ("EAD", 50, 98.5, 93.46, 7.711, 1, 99.6, 57.68, 5.839, 0.999),
    ("EAD", 70, 67.2, 148.9, 10.36, 1, 99.8, 90.84, 7.719, 1),
]


def table1_rows():
    from eadtransfer.evaluation import EvalRow

    rows = []
    for attack, conf, *vals in TABLE1:
        for targeted, (asr, a, b, c) in ((True, vals[:4]), (False, vals[4:])):
            rows.append(EvalRow(attack, {"confidence": conf}, targeted, asr, a, b, c, n=1000))
    return rows
