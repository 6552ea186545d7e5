"""
Five attacks on one classifier
==============================

Train a small network on part of MNIST, then craft adversarial examples
for a handful of test digits with FGM, I-FGM, PGD, C&W and EAD.  The
fixed-budget attacks use every bit of their L-inf allowance; the
optimisation attacks look for the smallest change that flips the label,
and EAD's L1 term makes that change sparse.

Needs the MNIST files (``python -m eadtransfer fetch-data``).  Takes a
few minutes on one core.
"""

import numpy as np

from eadtransfer import attacks as A
from eadtransfer import evaluation as E
from eadtransfer import mnist
from eadtransfer import models as M

train = mnist.load_mnist("train")
test = mnist.load_mnist("test")

# A desk-sized network sees 20k images once; that is enough for ~97% accuracy
model = M.train_natural(M.NetworkSpec.desk(), train, M.TrainConfig(epochs=1, seed=0, max_examples=20000))
print(f"clean test accuracy {100 * M.accuracy(model, test):.2f}%")

# Ten test digits, attacked non-targeted (any wrong label will do)
samples, _ = mnist.sample_subset(test, 10, seed=0)
goals = mnist.make_goals(samples.labels, targeted=False, seed=0)

# Fewer binary-search steps and iterations than the full setting, to keep this quick
quick = dict(binary_steps=5, iters=300)
runs = {
    "fgm": dict(epsilon=0.3),
    "ifgm": dict(epsilon=0.3),
    "pgd": dict(epsilon=0.3),
    "cw": dict(config=A.CwEadConfig(beta=0.0, **quick)),
    "ead": dict(config=A.CwEadConfig(beta=1e-2, **quick)),
}
crafted = {}
for name, kw in runs.items():
    outcomes = A.run_attack(name, model, samples.images, goals, seed=1, **kw)
    crafted[name] = outcomes
    wins = [o for o in outcomes if o.whitebox_success]
    l1, l2, linf = (np.mean([getattr(o, k) for o in wins]) if wins else float("nan") for k in ("l1", "l2", "linf"))
    print(f"{E.ATTACK_NAMES[name]:>6}: {len(wins):2d}/10 fooled   L1 {l1:7.2f}   L2 {l2:6.3f}   Linf {linf:5.3f}")

# One column per attack, clean digits on the left
columns = [samples.images] + [np.stack([o.adversarial for o in crafted[n]]) for n in runs]
tiles = [col[i] for i in range(len(samples)) for col in columns]
path = E.render_grid(tiles, (len(samples), len(columns)), "demo_attacks.png")
print(f"wrote {path}: columns are clean, " + ", ".join(E.ATTACK_NAMES[n] for n in runs))
