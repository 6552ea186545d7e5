import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eadtransfer import attacks as A
from eadtransfer import tensor as T
from eadtransfer.attacks import CwEadConfig, PgdConfig
from eadtransfer.mnist import AttackGoal
from eadtransfer.models import Ensemble
from eadtransfer.tensor import GradientTape, Tensor, backward

from helpers import LinearModel, random_images

# -- margin loss ---------------------------------------------------------------


def test_margin_targeted():
    assert A.margin_loss(Tensor([2.0, 5.0, 1.0]), AttackGoal(1, 0), 0).item() == 3.0


def test_margin_clamped_at_minus_kappa():
    assert A.margin_loss(Tensor([5.0, 2.0, 1.0]), AttackGoal(1, 0), 1).item() == -1.0


def test_margin_nontargeted():
    assert A.margin_loss(Tensor([5.0, 2.0, 1.0]), AttackGoal(0), 0).item() == 3.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=10, max_size=10),
    st.integers(0, 9),
    st.floats(0, 50),
    st.floats(0, 50),
)
def test_margin_monotone_in_kappa(z, t, k1, k2):
    goal = AttackGoal((t + 1) % 10, t)
    lo, hi = sorted((k1, k2))
    f_lo = A.margin_loss(Tensor(np.array(z)), goal, lo).item()
    f_hi = A.margin_loss(Tensor(np.array(z)), goal, hi).item()
    assert f_hi <= f_lo + 1e-12
    # success at the larger kappa implies success at the smaller one
    if f_hi <= -hi:
        assert f_lo <= -lo


def test_margin_gradient_matches_finite_differences():
    g = np.random.default_rng(0)
    z = g.standard_normal((4, 10))
    goals = [AttackGoal(1, 3), AttackGoal(2), AttackGoal(5, 0), AttackGoal(9)]
    zt = Tensor(z)
    with GradientTape() as tape:
        tape.watch(zt)
        loss = T.tensor_sum(A.margin_loss(zt, goals, 0.5))
    analytic = backward(tape, loss)[zt].data
    numeric = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += 1e-6
        zm[idx] -= 1e-6
        numeric[idx] = (
            T.tensor_sum(A.margin_loss(Tensor(zp), goals, 0.5)).item() - T.tensor_sum(A.margin_loss(Tensor(zm), goals, 0.5)).item()
        ) / 2e-6
    np.testing.assert_allclose(analytic, numeric, atol=1e-6)


# -- FGM / I-FGM / PGD ---------------------------------------------------------


def test_fgm_step_by_hand():
    out = A.fgm_step(np.array([[0.5, 0.5]]), np.array([[1.0, -1.0]]), 0.3, [True])
    np.testing.assert_allclose(out, [[0.2, 0.8]])


def test_fgm_step_box_clip():
    out = A.fgm_step(np.array([[0.1]]), np.array([[2.0]]), 0.3, [True])
    assert out[0, 0] == 0.0


def test_fgm_nontargeted_ascends():
    out = A.fgm_step(np.array([[0.5]]), np.array([[2.0]]), 0.3, [False])
    assert out[0, 0] == pytest.approx(0.8)


@pytest.mark.parametrize("attack", ["fgm", "ifgm", "pgd"])
def test_zero_epsilon_is_identity(attack):
    model = LinearModel()
    x = random_images(5)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    outs = A.run_attack(attack, model, x, goals, epsilon=0.0, config=None if attack == "fgm" else 0.0)
    for o, x0 in zip(outs, x):
        np.testing.assert_array_equal(o.adversarial, x0)
        assert o.linf == 0.0


@pytest.mark.parametrize("attack", ["ifgm", "pgd"])
@pytest.mark.parametrize("eps", [0.05, 0.3, 0.8])
def test_ball_and_box_invariants(attack, eps):
    model = LinearModel(seed=1, scale=0.05)
    x = random_images(200, seed=2)
    goals = [AttackGoal(int(y), int((y + 3) % 10)) if i % 2 else AttackGoal(int(y)) for i, y in enumerate(model.predict(x))]
    outs = A.run_attack(attack, model, x, goals, config=eps, seed=4)
    adv = np.stack([o.adversarial for o in outs])
    assert np.abs(adv - x).max() <= eps + 1e-6
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    assert all(o.linf <= eps + 1e-6 for o in outs)


def test_pgd_seeded_determinism():
    model = LinearModel()
    x = random_images(4)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    a = A.pgd(model, x, goals, 0.3, seed=5)
    b = A.pgd(model, x, goals, 0.3, seed=5)
    c = A.pgd(model, x, goals, 0.3, seed=6)
    assert all(np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, b))
    assert any(not np.array_equal(p.adversarial, q.adversarial) for p, q in zip(a, c))


def test_pgd_per_example_streams_independent_of_batching():
    model = LinearModel()
    x = random_images(6)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    whole = A.pgd(model, x, goals, 0.2, seed=1)
    part = A.pgd(model, x[3:], goals[3:], 0.2, seed=1, indices=range(3, 6))
    for p, q in zip(whole[3:], part):
        np.testing.assert_allclose(p.adversarial, q.adversarial, atol=1e-6)


def test_step_sizes():
    assert PgdConfig.ifgm(0.4).step == pytest.approx(0.01)
    assert PgdConfig.pgd(0.4).step == pytest.approx(0.02)
    with pytest.raises(ValueError):
        PgdConfig(1.5)


def test_pgd_whitebox_flag_is_top1_goal():
    model = LinearModel(scale=0.05)
    x = random_images(50, seed=3)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    outs = A.pgd(model, x, goals, 0.3, seed=0)
    pred = model.predict(np.stack([o.adversarial for o in outs]))
    assert [o.whitebox_success for o in outs] == [bool(p != g.true_class) for p, g in zip(pred, goals)]


def test_linear_model_is_fooled_by_ifgm():
    model = LinearModel(scale=0.05)
    x = random_images(100, seed=7)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    outs = A.ifgm(model, x, goals, 0.3)
    assert np.mean([o.whitebox_success for o in outs]) > 0.9


# -- shrinkage -----------------------------------------------------------------


@pytest.mark.parametrize(
    "z,x0,expected", [(0.5, 0.3, 0.4), (0.35, 0.3, 0.3), (1.5, 0.9, 1.0), (-0.5, 0.2, 0.0), (0.1, 0.3, 0.2)]
)
def test_shrink_piecewise(z, x0, expected):
    assert A.shrink(np.array([z]), np.array([x0]), 0.1)[0] == pytest.approx(expected)


def prox_grid(z, x0, beta, step=1e-4):
    grid = np.arange(0.0, 1.0 + step / 2, step)
    return grid[np.argmin(beta * np.abs(grid - x0) + 0.5 * (grid - z) ** 2)]


def test_shrink_matches_grid_search():
    g = np.random.default_rng(0)
    for _ in range(500):
        z, x0, beta = g.uniform(-1, 2), g.uniform(0, 1), g.uniform(0, 0.5)
        assert abs(A.shrink(np.array([z]), np.array([x0]), beta)[0] - prox_grid(z, x0, beta)) < 1e-3


def test_shrink_with_zero_beta_is_box_projection():
    z = np.random.default_rng(1).uniform(-1, 2, 1000)
    x0 = np.random.default_rng(2).uniform(0, 1, 1000)
    np.testing.assert_array_equal(A.shrink(z, x0, 0.0), np.clip(z, 0, 1))


# -- binary search -------------------------------------------------------------


def test_binary_search_always_succeeds_halves():
    _, c_used, trace = A.binary_search_c(lambda c: (True, c, c), 1e-3, 9)
    np.testing.assert_allclose(trace, [1e-3 / 2**k for k in range(9)])
    assert c_used == pytest.approx(trace[-1])


def test_binary_search_never_succeeds():
    best, c_used, trace = A.binary_search_c(lambda c: (False, 0.0, None), 1e-3, 9)
    assert best is None
    assert c_used == pytest.approx(1e-3 * 10**8)
    np.testing.assert_allclose(trace, [1e-3 * 10**k for k in range(9)])


def test_binary_search_threshold_trace():
    best, c_used, trace = A.binary_search_c(lambda c: (c >= 0.004, 1.0 / c, c), 1e-3, 9)
    np.testing.assert_allclose(trace[:4], [0.001, 0.01, 0.0055, 0.00325])
    assert trace[1] == pytest.approx(0.01)  # first success
    assert all(abs(a - 0.004) > abs(b - 0.004) for a, b in zip(trace[2:-1:2], trace[4::2]))
    # lowest distortion (= largest c among successes) is kept
    assert best == max(c for c in trace if c >= 0.004)


def test_update_c_vectorised():
    c, lo, hi = A.update_c(np.array([1.0, 1.0]), np.zeros(2), np.full(2, A.NO_UPPER), np.array([True, False]))
    np.testing.assert_allclose(c, [0.5, 10.0])
    np.testing.assert_allclose(lo, [0.0, 1.0])
    np.testing.assert_allclose(hi, [1.0, A.NO_UPPER])


# -- C&W / EAD -----------------------------------------------------------------

FAST = CwEadConfig(kappa=0.0, beta=1e-2, binary_steps=4, iters=60, c0=0.1)


def test_objectives_agree_at_beta_zero():
    g = np.random.default_rng(3)
    x0 = g.random((20, 5))
    x = g.random((20, 5))
    f = g.standard_normal(20)
    np.testing.assert_allclose(A.elastic_net_objective(f, x, x0, 2.5, 0.0), A.cw_objective(f, x, x0, 2.5), rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", [A.ead_attack, A.cw_attack])
def test_already_satisfied_goal_gives_zero_distortion(method):
    model = LinearModel()
    x = random_images(3)
    pred = model.predict(x)
    goals = [AttackGoal(int((p + 1) % 10), int(p)) for p in pred]
    outs = method(model, x, goals, FAST)
    for o, x0 in zip(outs, x):
        assert o.whitebox_success
        assert o.l1 == 0.0 and o.l2 == 0.0
        np.testing.assert_array_equal(o.adversarial, x0)


def reference_fista_beta0(model, x0, goal, c, iters, lr0):
    # independent transcription of the loop with plain box projection
    cls, targeted = np.array([goal.label]), np.array([goal.targeted])
    x, y = x0.copy(), x0.copy()
    trace = []
    for k in range(iters):
        lr = lr0 * (1 - k / iters) ** 0.5
        yt = Tensor(y[None])
        with GradientTape() as tape:
            tape.watch(yt)
            loss = T.tensor_sum(A._margin_op(model.logits(yt), cls, targeted, 0.0))
        grad = c * backward(tape, loss)[yt].data[0] + 2 * (y - x0)
        x_new = np.clip(y - np.float32(lr) * grad, 0, 1)
        y = x_new + np.float32(k / (k + 3.0)) * (x_new - x)
        x = x_new
        trace.append(x.copy())
    return trace


def test_ead_beta_zero_follows_box_projected_fista():
    model = LinearModel(scale=0.05)
    x0 = random_images(1, seed=11)[0]
    goal = AttackGoal(int(model.predict(x0[None])[0]))
    cfg = CwEadConfig(kappa=0.0, beta=0.0, binary_steps=1, iters=30, c0=5.0, abort_early=False)
    trace = reference_fista_beta0(model, x0, goal, 5.0, 30, cfg.lr0)
    out = A.ead_attack(model, x0[None], [goal], cfg)[0]
    dists = [np.square(t - x0).sum() for t in trace]
    succ = [model.predict(t[None])[0] != goal.true_class for t in trace]
    if any(succ):
        best = min(d for d, s in zip(dists, succ) if s)
        assert out.whitebox_success
        assert out.l2**2 == pytest.approx(best, rel=1e-4)
    else:
        assert not out.whitebox_success


@pytest.mark.parametrize("method", [A.ead_attack, A.cw_attack])
def test_success_flag_matches_margin(method):
    model = LinearModel(scale=0.05)
    x = random_images(10, seed=5)
    goals = [AttackGoal(int(y), int((y + 1) % 10)) for y in model.predict(x)]
    cfg = CwEadConfig(kappa=2.0, beta=1e-2, binary_steps=3, iters=50, c0=1.0)
    outs = method(model, x, goals, cfg)
    assert any(o.whitebox_success for o in outs)
    for o, g in zip(outs, goals):
        f = A.margin_loss(model.logits(o.adversarial), g, 2.0).item()
        raw, _ = A.margin_values(model.logits(o.adversarial[None]).data, np.array([g.label]), np.array([True]))
        assert o.whitebox_success == bool(raw[0] <= -2.0 + 1e-6)
        if o.whitebox_success:
            assert f == pytest.approx(-2.0)
        else:
            assert o.l1 == 0.0 and np.array_equal(o.adversarial, x[goals.index(g)])


def test_ead_output_in_box_and_objective_not_worse_than_start():
    model = LinearModel(scale=0.05)
    x = random_images(8, seed=6)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    outs = A.ead_attack(model, x, goals, FAST)
    for o, x0, g in zip(outs, x, goals):
        assert o.adversarial.min() >= 0 and o.adversarial.max() <= 1
        if o.whitebox_success:
            f_adv = A.margin_loss(model.logits(o.adversarial), g, 0.0).item()
            f_0 = A.margin_loss(model.logits(x0), g, 0.0).item()
            obj = A.elastic_net_objective([f_adv], o.adversarial[None], x0[None], o.c_used, FAST.beta)[0]
            start = A.elastic_net_objective([f_0], x0[None], x0[None], o.c_used, FAST.beta)[0]
            assert obj <= start + 1e-6


def test_larger_beta_gives_sparser_perturbations():
    model = LinearModel(scale=0.05)
    x = random_images(10, seed=8)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    cfg = CwEadConfig(kappa=0.0, binary_steps=5, iters=100, c0=1.0)
    lo = A.ead_attack(model, x, goals, CwEadConfig(**{**cfg.__dict__, "beta": 1e-4}))
    hi = A.ead_attack(model, x, goals, CwEadConfig(**{**cfg.__dict__, "beta": 1e-1}))
    both = [(a, b) for a, b in zip(lo, hi) if a.whitebox_success and b.whitebox_success]
    assert both
    assert np.mean([b.l1 for _, b in both]) < np.mean([a.l1 for a, _ in both])


@pytest.mark.parametrize("method", [A.ead_attack, A.cw_attack])
def test_early_abort_keeps_results_valid(method):
    model = LinearModel(scale=0.05)
    x = random_images(8, seed=12)
    goals = [AttackGoal(int(y), int((y + 4) % 10)) for y in model.predict(x)]
    cfg = CwEadConfig(kappa=1.0, binary_steps=3, iters=100, c0=1.0)
    full = method(model, x, goals, CwEadConfig(**{**cfg.__dict__, "abort_early": False}))
    fast = method(model, x, goals, cfg)
    assert [a.whitebox_success for a in full] == [b.whitebox_success for b in fast]
    for b, g in zip(fast, goals):
        assert b.adversarial.min() >= 0 and b.adversarial.max() <= 1
        if b.whitebox_success:
            z = model.logits(b.adversarial[None]).data[0]
            assert z[g.target] - np.delete(z, g.target).max() >= 1.0 - 1e-5


def test_cw_ignores_beta():
    model = LinearModel(scale=0.05)
    x = random_images(2, seed=9)
    goals = [AttackGoal(int(y)) for y in model.predict(x)]
    a = A.cw_attack(model, x, goals, CwEadConfig(beta=0.0, binary_steps=2, iters=20))
    b = A.cw_attack(model, x, goals, CwEadConfig(beta=0.5, binary_steps=2, iters=20))
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.adversarial, q.adversarial)


# -- ensembles -----------------------------------------------------------------


def test_ensemble_loss_is_member_mean():
    ms = [LinearModel(seed=s) for s in range(3)]
    ens = Ensemble(ms)
    x = random_images(2)
    cls = np.array([1, 2])
    loss_e, grad_e, fused = A.loss_and_grad(ens, x, lambda z: T.softmax_cross_entropy(z, cls))
    parts = [A.loss_and_grad(m, x, lambda z: T.softmax_cross_entropy(z, cls)) for m in ms]
    np.testing.assert_allclose(loss_e, np.mean([p[0] for p in parts], axis=0), rtol=1e-5)
    np.testing.assert_allclose(grad_e, np.mean([p[1] for p in parts], axis=0), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(fused, np.mean([p[2] for p in parts], axis=0), rtol=1e-5)


def test_ensemble_member_success_implies_fused_success():
    ms = [LinearModel(seed=s, scale=0.05) for s in range(3)]
    x = random_images(6, seed=4)
    ens = Ensemble(ms)
    goals = [AttackGoal(int(y), int((y + 2) % 10)) for y in ens.predict(x)]
    outs = A.ead_attack(ens, x, goals, CwEadConfig(kappa=1.0, binary_steps=3, iters=60, c0=1.0))
    for o, g in zip(outs, goals):
        if o.whitebox_success:
            z = ens.logits(o.adversarial[None]).data
            assert z[0].argmax() == g.target
