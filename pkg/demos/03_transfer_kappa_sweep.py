"""
Does confidence buy transferability?
====================================

Craft EAD examples on an ensemble of naturally trained networks and test
them on a separately trained network the attacker never saw.  Raising
the confidence margin kappa makes the examples more distorted but also
more likely to fool the unseen model, until the margin gets so large that
the shortened search below stops finding white-box examples at all (a
failed example is returned unchanged and rarely fools anything).

The same experiment, at full settings and against an adversarially
trained target, is what ``python -m eadtransfer sweep`` runs.  Needs
the MNIST files; takes roughly ten minutes on one core.
"""

from eadtransfer import attacks as A
from eadtransfer import evaluation as E
from eadtransfer import mnist
from eadtransfer import models as M

train = mnist.load_mnist("train")
test = mnist.load_mnist("test")
desk = M.NetworkSpec.desk()


def quick_model(seed):
    return M.train_natural(desk, train, M.TrainConfig(epochs=1, seed=seed, max_examples=20000))


# Three source models fused by averaging logits, plus an unseen target
ensemble = M.Ensemble([quick_model(s) for s in (1, 2, 3)])
target = quick_model(10)
print(f"target clean accuracy {100 * M.accuracy(target, test):.2f}%")

samples, _ = mnist.sample_subset(test, 20, seed=7)
goals = mnist.make_goals(samples.labels, targeted=True, seed=7)

# Higher kappa needs a larger constant c, so the search starts at c = 0.1
# to reach big values within six binary-search steps
grid = E.kappa_sweep(ensemble, target, samples, goals, kappas=[0, 10, 20],
                     base=A.CwEadConfig(beta=1e-2, c0=0.1, binary_steps=6, iters=300))
print(E.report_table(grid.rows, format="markdown"))
for row in grid.rows:
    print(f"kappa {row.hyper['confidence']}: {row.whitebox_successes}/{row.n} succeeded white-box on the ensemble")
