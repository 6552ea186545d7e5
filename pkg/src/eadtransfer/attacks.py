"""Attacks: FGM, I-FGM, PGD, C&W L2 and EAD (elastic-net).

All attacks work on batches.  ``source`` is anything exposing
``logits(Tensor) -> Tensor`` over ``N x 1 x 28 x 28`` inputs: a single model
or an :class:`~eadtransfer.models.Ensemble`.  For ensembles the attack loss is
the mean of the member losses, while white-box success is judged on the
fused (mean) logits.

Goals are :class:`~eadtransfer.mnist.AttackGoal` objects, one per example.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .distortion import batch_norms
from .mnist import AttackGoal, rng
from .optim import Adam
from .tensor import GradientTape, Tensor, apply_op, backward, softmax_cross_entropy, tensor_sum


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    steps: int = 40
    step_size: float | None = None  # defaults to 2*eps/steps with random start, eps/steps without
    random_start: bool = True

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def step(self):
        if self.step_size is not None:
            return self.step_size
        scale = 2.0 if self.random_start else 1.0
        return scale * self.epsilon / self.steps

    @classmethod
    def ifgm(cls, epsilon, steps=40):
        return cls(epsilon, steps, None, random_start=False)

    @classmethod
    def pgd(cls, epsilon, steps=40):
        return cls(epsilon, steps, None, random_start=True)


@dataclass(frozen=True)
class CwEadConfig:
    kappa: float = 0.0
    beta: float = 1e-2
    c0: float = 1e-3
    binary_steps: int = 9
    iters: int = 1000
    lr0: float = 1e-2
    # exponent p in lr_k = lr0 * (1 - k/iters)**p for FISTA
    lr_decay_power: float = 0.5
    # stop an example's inner loop once its objective improves by less than
    # 0.01% over a tenth of the iteration budget
    abort_early: bool = True

    def __post_init__(self):
        if self.kappa < 0 or self.beta < 0:
            raise ValueError("kappa and beta must be non-negative")
        if self.c0 <= 0 or self.binary_steps < 1 or self.iters < 1 or self.lr0 <= 0:
            raise ValueError(f"invalid optimisation settings: {self}")


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    whitebox_success: bool
    l1: float
    l2: float
    linf: float
    c_used: float | None = None

    @property
    def distortions(self):
        return self.l1, self.l2, self.linf


# ---------------------------------------------------------------------------
# losses


def _goal_arrays(goals):
    if isinstance(goals, AttackGoal):
        goals = [goals]
    cls = np.array([g.label for g in goals], dtype=np.int64)
    targeted = np.array([g.targeted for g in goals], dtype=bool)
    return cls, targeted


def _runner_up(z, cls):
    """Index of the largest logit other than ``cls`` (ties: lowest index)."""
    masked = z.astype(np.float64, copy=True)
    masked[np.arange(len(z)), cls] = -np.inf
    return masked.argmax(axis=1)


def margin_values(z, cls, targeted):
    """Un-clamped margin: other-minus-target (targeted) or true-minus-other."""
    z = np.asarray(z, dtype=np.float64)
    rows = np.arange(len(z))
    other = _runner_up(z, cls)
    diff = z[rows, other] - z[rows, cls]
    return np.where(targeted, diff, -diff), other


def margin_loss(logits: Tensor, goals, kappa: float) -> Tensor:
    """Hinge loss ``max(margin, -kappa)`` on logits.

    Targeted: ``max(max_{j!=t} z_j - z_t, -kappa)``; non-targeted:
    ``max(z_y - max_{j!=y} z_j, -kappa)``.  A value of ``-kappa`` means the goal
    is met with confidence ``kappa``.  Accepts one logit vector with one goal
    (scalar result) or ``N x K`` logits with ``N`` goals (one value per row).
    """
    cls, targeted = _goal_arrays(goals)
    return _margin_op(logits, cls, targeted, kappa)


def _margin_op(logits, cls, targeted, kappa):
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if len(cls) != len(z):
        raise ValueError(f"{len(cls)} goals for {len(z)} rows of logits")
    m, other = margin_values(z, cls, targeted)
    # the clamp is flat at -kappa, so only active rows carry gradient
    active = m > -kappa
    out = np.maximum(m, -kappa).astype(logits.dtype)
    rows = np.arange(len(z))

    def vjp(g, needs):
        g = np.asarray(g, dtype=np.float64).reshape(-1) * active
        sign = np.where(targeted, 1.0, -1.0) * g
        grad = np.zeros(z.shape, dtype=np.float64)
        grad[rows, other] += sign
        grad[rows, cls] -= sign
        grad = grad.astype(logits.dtype)
        return (grad[0] if single else grad,)

    return apply_op(out[0] if single else out, (logits,), vjp)


def members(source):
    return list(getattr(source, "members", [source]))


def fused_logits(source, x) -> np.ndarray:
    """Mean member logits for a batch, as float64 numpy."""
    xt = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))
    outs = [m.logits(xt).data.astype(np.float64) for m in members(source)]
    return sum(outs) / len(outs)


def loss_and_grad(source, x: np.ndarray, per_member_loss: Callable):
    """Per-example mean-over-members loss and its gradient w.r.t. the inputs.

    Returns ``(loss[N], grad[N,...], fused_logits[N,K])``.
    """
    xt = Tensor._wrap(np.array(x))
    ms = members(source)
    with GradientTape() as tape:
        tape.watch(xt)
        logit_list = [m.logits(xt) for m in ms]
        losses = [per_member_loss(z) for z in logit_list]
        total = losses[0]
        for extra in losses[1:]:
            total = total + extra
        total = total * (1.0 / len(ms))
        scalar = tensor_sum(total)
    grad = backward(tape, scalar)[xt].data
    fused = sum(z.data.astype(np.float64) for z in logit_list) / len(ms)
    return total.data.astype(np.float64), grad, fused


def goal_met(fused, goals) -> np.ndarray:
    """Top-1 decision check (no margin): targeted hits t, non-targeted leaves y."""
    cls, targeted = _goal_arrays(goals)
    pred = np.asarray(fused).argmax(axis=1)
    return np.where(targeted, pred == cls, pred != cls)


def _outcomes(x_adv, x0, success, c_used=None, reset_failures=True):
    if reset_failures:
        x_adv = np.where(success.reshape((-1,) + (1,) * (x0.ndim - 1)), x_adv, x0)
    x_adv = x_adv.astype(x0.dtype)
    d1, d2, dinf = batch_norms(x_adv, x0)
    out = []
    for i in range(len(x0)):
        out.append(
            AttackOutcome(
                adversarial=x_adv[i],
                whitebox_success=bool(success[i]),
                l1=float(d1[i]),
                l2=float(d2[i]),
                linf=float(dinf[i]),
                c_used=None if c_used is None else float(c_used[i]),
            )
        )
    return out


def _as_batch(x0, goals):
    x0 = np.asarray(x0, dtype=np.float32)
    if isinstance(goals, AttackGoal):
        goals = [goals]
        x0 = x0[None]
    if len(goals) != len(x0):
        raise ValueError(f"{len(goals)} goals for {len(x0)} images")
    return x0, list(goals)


# ---------------------------------------------------------------------------
# L-infinity attacks


def _ce_loss(cls):
    return lambda z: softmax_cross_entropy(z, cls)


def fgm_step(x0, grad, epsilon, targeted):
    """One signed step: descend J toward ``t`` (targeted) or ascend J on ``y``."""
    direction = np.where(np.asarray(targeted).reshape((-1,) + (1,) * (np.ndim(x0) - 1)), -1.0, 1.0)
    x = x0 + direction * epsilon * np.sign(grad)
    return np.clip(x, 0.0, 1.0).astype(np.asarray(x0).dtype)


def project_linf(x, x0, epsilon):
    """Project onto the epsilon-ball around ``x0`` intersected with [0, 1]."""
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def fgm(source, x0, goals, epsilon):
    """Fast gradient (sign) method: a single step of size ``epsilon``."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    x0, goals = _as_batch(x0, goals)
    cls, targeted = _goal_arrays(goals)
    _, grad, _ = loss_and_grad(source, x0, _ce_loss(cls))
    x = fgm_step(x0, grad, np.float32(epsilon), targeted)
    success = goal_met(fused_logits(source, x), goals)
    return _outcomes(x, x0, success, reset_failures=False)


def pgd_perturb(source, x0, cls, targeted, config: PgdConfig, seed=0, indices=None, loss=None):
    """Run the projected signed-gradient loop; returns the perturbed batch.

    Random starts for example ``i`` are drawn from the stream ``(seed,
    indices[i])`` so results do not depend on batch composition.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.float32(config.epsilon)
    step = np.float32(config.step)
    lo = x0 - eps
    hi = x0 + eps
    if config.random_start and config.epsilon > 0:
        if indices is None:
            indices = range(len(x0))
        noise = np.stack(
            [rng((seed, int(i))).uniform(-config.epsilon, config.epsilon, size=x0.shape[1:]) for i in indices]
        ).astype(np.float32)
        x = np.clip(x0 + noise, 0.0, 1.0)
    else:
        x = x0.copy()
    direction = np.where(np.asarray(targeted), -1.0, 1.0).astype(np.float32).reshape((-1,) + (1,) * (x0.ndim - 1))
    loss = loss or _ce_loss(cls)
    for _ in range(config.steps):
        _, grad, _ = loss_and_grad(source, x, loss)
        x = x + direction * step * np.sign(grad).astype(np.float32)
        x = np.clip(np.clip(x, lo, hi), 0.0, 1.0)
    return x


def ifgm(source, x0, goals, config: PgdConfig | float, seed=0, indices=None):
    """Iterative FGM: no random start, step ``eps/steps`` unless configured."""
    if not isinstance(config, PgdConfig):
        config = PgdConfig.ifgm(config)
    return pgd(source, x0, goals, replace(config, random_start=False), seed, indices)


def pgd(source, x0, goals, config: PgdConfig | float, seed=0, indices=None):
    """PGD with (by default) a uniform random start inside the epsilon-ball."""
    if not isinstance(config, PgdConfig):
        config = PgdConfig.pgd(config)
    x0, goals = _as_batch(x0, goals)
    cls, targeted = _goal_arrays(goals)
    x = pgd_perturb(source, x0, cls, targeted, config, seed, indices)
    success = goal_met(fused_logits(source, x), goals)
    return _outcomes(x, x0, success, reset_failures=False)


# ---------------------------------------------------------------------------
# optimisation attacks


def shrink(z, x0, beta):
    """Projected soft-thresholding: prox of ``beta*|x - x0|`` over the [0,1] box."""
    z = np.asarray(z)
    x0 = np.asarray(x0)
    d = z - x0
    return np.where(d > beta, np.minimum(z - beta, 1.0), np.where(d < -beta, np.maximum(z + beta, 0.0), x0)).astype(
        np.result_type(z.dtype, x0.dtype)
    )


def elastic_net_objective(margin_f, x, x0, c, beta):
    """``c*f + beta*||x - x0||_1 + ||x - x0||_2^2`` for batches (per row)."""
    d = (np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)).reshape(len(x), -1)
    return np.asarray(c) * np.asarray(margin_f) + beta * np.abs(d).sum(axis=1) + (d * d).sum(axis=1)


def cw_objective(margin_f, x, x0, c):
    d = (np.asarray(x, dtype=np.float64) - np.asarray(x0, dtype=np.float64)).reshape(len(x), -1)
    return np.asarray(c) * np.asarray(margin_f) + (d * d).sum(axis=1)


NO_UPPER = 1e10


def update_c(c, lo, hi, success):
    """One binary-search update on the regularisation constant.

    Success tightens the upper bound and bisects; failure raises the lower
    bound and multiplies by ten until an upper bound exists.
    """
    c = np.asarray(c, dtype=np.float64)
    success = np.asarray(success, dtype=bool)
    hi = np.where(success, np.minimum(hi, c), hi)
    lo = np.where(success, lo, np.maximum(lo, c))
    has_upper = hi < NO_UPPER
    nxt = np.where(has_upper, (lo + hi) / 2.0, c * 10.0)
    return nxt, lo, hi


def binary_search_c(attack, c0=1e-3, steps=9):
    """Scalar search driver.

    ``attack(c)`` returns ``(success, distortion, payload)``.  Returns
    ``(best_payload, c_used, trace)`` where ``best_payload`` is the
    minimal-distortion success (``None`` if no step succeeded), ``c_used``
    is the constant it was found at (the last tried constant on failure) and
    ``trace`` lists every constant tried.
    """
    c, lo, hi = c0, 0.0, NO_UPPER
    best, best_dist, best_c = None, np.inf, None
    trace = []
    for _ in range(steps):
        trace.append(float(c))
        ok, dist, payload = attack(float(c))
        if ok and dist < best_dist:
            best, best_dist, best_c = payload, dist, float(c)
        nxt, lo, hi = update_c(c, lo, hi, ok)
        c = float(nxt)
    return best, (best_c if best is not None else trace[-1]), trace


def _margin_fn(cls, targeted, kappa):
    return lambda z: _margin_op(z, cls, targeted, kappa)


def _optimise(source, x0, goals, config: CwEadConfig, method: str):
    """Shared driver for EAD (projected FISTA) and C&W (Adam), vectorised over rows.

    Each example keeps its own constant ``c`` and binary-search bounds.  The
    best iterate is the successful one (margin at most ``-kappa`` on the fused
    source logits) with the smallest elastic-net (EAD) or squared-L2 (C&W)
    distortion.  With ``abort_early`` an example leaves the inner loop once
    its objective stalls; the remaining rows continue as a smaller batch.
    """
    x0, goals = _as_batch(x0, goals)
    n = len(x0)
    cls, targeted = _goal_arrays(goals)
    kappa = config.kappa
    beta = config.beta if method == "ead" else 0.0
    flat = (-1,) + (1,) * (x0.ndim - 1)
    window = max(1, config.iters // 10)

    c = np.full(n, config.c0)
    lo = np.zeros(n)
    hi = np.full(n, NO_UPPER)
    best_dist = np.full(n, np.inf)
    best_x = x0.copy()
    best_c = np.full(n, np.nan)
    last_c = c

    for _ in range(config.binary_steps):
        step_ok = np.zeros(n, dtype=bool)
        rows = np.arange(n)
        x0a = x0
        xa = x0.copy()  # current iterate x_k
        ya = x0.copy()  # FISTA momentum point
        opt = Adam([x0.shape], lr=config.lr0, dtype=np.float32) if method == "cw" else None
        prev_obj = np.full(n, np.inf)

        def record(x, fused):
            """Score iterate ``x`` for the active rows; returns their objectives."""
            m, _ = margin_values(fused, cls[rows], targeted[rows])
            d = (x.astype(np.float64) - x0a.astype(np.float64)).reshape(len(rows), -1)
            dist = (d * d).sum(axis=1) + beta * np.abs(d).sum(axis=1)
            ok = m <= -kappa
            step_ok[rows] |= ok
            better = ok & (dist < best_dist[rows])
            idx = rows[better]
            best_dist[idx] = dist[better]
            best_x[idx] = x[better]
            best_c[idx] = c[idx]
            return c[rows] * np.maximum(m, -kappa) + dist

        for k in range(config.iters):
            f_loss = _margin_fn(cls[rows], targeted[rows], kappa)
            cb = c[rows].reshape(flat).astype(np.float32)
            if method == "ead":
                lr = config.lr0 * (1.0 - k / config.iters) ** config.lr_decay_power
                _, gf, _ = loss_and_grad(source, ya, f_loss)
                grad = cb * gf + 2.0 * (ya - x0a)
                x_next = shrink(ya - np.float32(lr) * grad, x0a, np.float32(beta * lr))
                ya = (x_next + np.float32(k / (k + 3.0)) * (x_next - xa)).astype(np.float32)
                xa = x_next
                obj = record(xa, fused_logits(source, xa))
            else:
                _, gf, fused = loss_and_grad(source, xa, f_loss)
                obj = record(xa, fused)
                grad = cb * gf + 2.0 * (xa - x0a)
                (xa,) = opt.step([xa], [grad.astype(np.float32)])
                xa = np.clip(xa, 0.0, 1.0).astype(np.float32)
                if k == config.iters - 1:
                    record(xa, fused_logits(source, xa))

            if config.abort_early and (k + 1) % window == 0:
                keep = obj <= 0.9999 * prev_obj[rows]
                prev_obj[rows] = obj
                if not keep.all():
                    if method == "cw":
                        # the post-update iterate of a leaving row still counts
                        gone = ~keep
                        saved = rows
                        rows = rows[gone]
                        x0a_full = x0a
                        x0a = x0a_full[gone]
                        record(xa[gone], fused_logits(source, xa[gone]))
                        rows, x0a = saved, x0a_full
                        opt.select(keep)
                    rows = rows[keep]
                    xa, ya, x0a = xa[keep], ya[keep], x0a[keep]
                    if not len(rows):
                        break

        last_c = c
        c, lo, hi = update_c(c, lo, hi, step_ok)

    success = np.isfinite(best_dist)
    c_used = np.where(success, best_c, last_c)
    return _outcomes(best_x, x0, success, c_used)


def ead_attack(source, x0, goals, config: CwEadConfig = CwEadConfig()):
    """Elastic-net attack solved with projected FISTA and a c binary search."""
    return _optimise(source, x0, goals, config, "ead")


def cw_attack(source, x0, goals, config: CwEadConfig = CwEadConfig(beta=0.0)):
    """C&W L2 attack: Adam on ``c*f + ||x - x0||^2`` with box projection."""
    if config.beta != 0:
        config = replace(config, beta=0.0)
    return _optimise(source, x0, goals, config, "cw")


ATTACKS = {
    "fgm": fgm,
    "ifgm": ifgm,
    "pgd": pgd,
    "cw": cw_attack,
    "ead": ead_attack,
}


def run_attack(name: str, source, x0, goals, *, epsilon=None, config=None, seed=0, indices=None) -> Sequence[AttackOutcome]:
    """Dispatch by attack id (``fgm``, ``ifgm``, ``pgd``, ``cw``, ``ead``)."""
    if name == "fgm":
        return fgm(source, x0, goals, epsilon)
    if name in ("ifgm", "pgd"):
        cfg = config if config is not None else epsilon
        return ATTACKS[name](source, x0, goals, cfg, seed=seed, indices=indices)
    if name in ("cw", "ead"):
        return ATTACKS[name](source, x0, goals, config if config is not None else CwEadConfig())
    raise KeyError(f"unknown attack {name!r}")
