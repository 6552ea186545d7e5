"""Perturbation norms on [0,1]-scaled images."""

import numpy as np


def _diff(x, x0):
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    x0 = np.asarray(getattr(x0, "data", x0), dtype=np.float64)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x0.shape}")
    return x - x0


def l1(x, x0):
    return float(np.abs(_diff(x, x0)).sum())


def l2(x, x0):
    return float(np.sqrt(np.square(_diff(x, x0)).sum()))


def linf(x, x0):
    d = _diff(x, x0)
    return float(np.abs(d).max()) if d.size else 0.0


def batch_norms(x, x0):
    """Per-row (L1, L2, Linf) for batches shaped ``(n, ...)``."""
    d = _diff(x, x0).reshape(len(x), -1)
    a = np.abs(d)
    return a.sum(axis=1), np.sqrt((d * d).sum(axis=1)), a.max(axis=1)
