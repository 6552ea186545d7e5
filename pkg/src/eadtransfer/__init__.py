"""Elastic-net and L-infinity adversarial attacks on MNIST classifiers, with a
transfer-evaluation harness for adversarially trained targets.

Everything runs on numpy, including the small reverse-mode autodiff engine in
:mod:`eadtransfer.tensor`.
"""

__version__ = "0.1.0"
