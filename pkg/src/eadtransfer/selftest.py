"""Fast invariant checks bundled with the package (``python -m eadtransfer selftest``).

Each check returns ``(ok, detail)``.  They use tiny random networks and
synthetic images, so no dataset or trained checkpoint is needed.
"""

from __future__ import annotations

import numpy as np

from . import attacks as A
from . import evaluation as E
from . import models as M
from . import tensor as T
from .mnist import AttackGoal, choose_target

TINY = M.NetworkSpec(conv1=2, conv2=3, hidden=6)


def _images(n, seed):
    return np.random.default_rng(seed).random((n, 1, 28, 28)).astype(np.float32)


def check_gradients():
    """Autodiff vs central differences on a float64 conv net."""
    g = np.random.default_rng(0)
    params = {k: T.Tensor(v.astype(np.float64)) for k, v in M.init_params(TINY, 1).items()}
    x = g.random((1, 1, 28, 28))
    y = np.array([3])

    def loss_of(p):
        return T.tensor_sum(T.softmax_cross_entropy(M.forward(TINY, p, T.Tensor(x)), y))

    with T.GradientTape() as tape:
        tape.watch(*params.values())
        loss = loss_of(params)
    grads = T.backward(tape, loss)
    pattern = M.activation_pattern(TINY, params, x)
    worst, checked = 0.0, 0
    for name in ("conv1.w", "conv2.b", "fc1.b", "fc2.w"):
        base = params[name].data
        for idx in map(tuple, g.integers(0, base.shape, size=(4, base.ndim))):
            plus, minus = base.copy(), base.copy()
            plus[idx] += 1e-3
            minus[idx] -= 1e-3
            p_plus, p_minus = {**params, name: T.Tensor(plus)}, {**params, name: T.Tensor(minus)}
            # central differences are only meaningful away from ReLU/pool kinks
            if not all(np.array_equal(M.activation_pattern(TINY, q, x), pattern) for q in (p_plus, p_minus)):
                continue
            checked += 1
            fp = loss_of(p_plus).item()
            fm = loss_of(p_minus).item()
            num = (fp - fm) / 2e-3
            ana = grads[params[name]].data[idx]
            worst = max(worst, abs(num - ana) / max(1e-8, abs(num) + abs(ana)))
    return checked > 0 and worst < 1e-6, f"max relative error {worst:.2e} over {checked} coordinates"


def check_projection():
    model = M.Model(TINY, M.init_params(TINY, 2))
    x = _images(20, 3)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    worst = 0.0
    for eps in (0.1, 0.5, 1.0):
        for name in ("ifgm", "pgd"):
            adv = np.stack([o.adversarial for o in A.run_attack(name, model, x, goals, config=eps, seed=1)])
            if adv.min() < 0 or adv.max() > 1:
                return False, f"{name} left [0,1] at eps={eps}"
            worst = max(worst, float(np.abs(adv - x).max()) - eps)
    return worst <= 1e-6, f"max overshoot {worst:.1e}"


def check_beta_zero():
    g = np.random.default_rng(4)
    x0, x = g.random((100, 8)), g.random((100, 8))
    f = g.standard_normal(100)
    gap = np.abs(A.elastic_net_objective(f, x, x0, 3.0, 0.0) - A.cw_objective(f, x, x0, 3.0)).max()
    return gap < 1e-6, f"max gap {gap:.1e}"


def check_shrink():
    g = np.random.default_rng(5)
    grid = np.arange(0.0, 1.0 + 5e-5, 1e-4)
    worst = 0.0
    for _ in range(200):
        z, x0, beta = g.uniform(-1, 2), g.uniform(0, 1), g.uniform(0, 0.5)
        best = grid[np.argmin(beta * np.abs(grid - x0) + 0.5 * (grid - z) ** 2)]
        worst = max(worst, abs(A.shrink(np.array([z]), np.array([x0]), beta)[0] - best))
    return worst < 1e-3, f"max deviation {worst:.1e}"


def check_margin():
    z = T.Tensor([2.0, 5.0, 1.0])
    vals = (A.margin_loss(z, AttackGoal(1, 0), 0).item(), A.margin_loss(T.Tensor([5.0, 2.0, 1.0]), AttackGoal(1, 0), 1).item())
    return vals == (3.0, -1.0), f"values {vals}"


def check_targets():
    bad = [(y, s) for y in range(10) for s in range(100) if choose_target(y, s) == y]
    return not bad, f"{len(bad)} draws equal to the true class"


def check_checkpoint():
    model = M.Model(TINY, M.init_params(TINY, 6), {"mode": "natural"})
    raw = M.checkpoint_bytes(model)
    return M.checkpoint_bytes(M.parse_checkpoint(raw)) == raw, f"{len(raw)} bytes"


def check_ensemble():
    ms = [M.Model(TINY, M.init_params(TINY, s)) for s in range(3)]
    x = _images(2, 7)
    gap = np.abs(M.Ensemble(ms).logits(x).data - sum(m.logits(x).data for m in ms) / 3).max()
    return gap < 1e-6, f"max gap {gap:.1e}"


def check_report():
    rows = [
        E.EvalRow("PGD", {"confidence": None}, True, 68.5, 188.3, 8.947, 0.6, 1000),
        E.EvalRow("PGD", {"confidence": None}, False, 99.9, 270.5, 13.27, 0.8, 1000),
    ]
    line = E.report_table(rows).splitlines()[1]
    return line == "PGD,none,68.5,188.3,8.947,0.6,99.9,270.5,13.27,0.8", line


def check_determinism():
    model = M.Model(TINY, M.init_params(TINY, 8))
    x = _images(4, 9)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    a = A.pgd(model, x, goals, 0.3, seed=3)
    b = A.pgd(model, x, goals, 0.3, seed=3)
    return all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b)), "seeded PGD repeated"


CHECKS = {
    "gradients": check_gradients,
    "projection": check_projection,
    "beta-zero": check_beta_zero,
    "shrinkage": check_shrink,
    "margin": check_margin,
    "targets": check_targets,
    "checkpoint": check_checkpoint,
    "ensemble": check_ensemble,
    "report": check_report,
    "determinism": check_determinism,
}


def run_all():
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed selftest
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        yield name, bool(ok), detail
