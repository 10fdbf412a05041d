import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isotn.stiefel import (
    SCHEMES,
    EuclideanOptimizer,
    IsometricParam,
    MethodSchedule,
    MomentumState,
    SoftConstraintState,
    constraint_deviation,
    constraint_error,
    ev_update,
    mixed_select,
    momentum_step,
    project_tangent,
    retract,
    skew_generator,
    soft_loss,
    step,
    tune_lambda,
)
from isotn.tensor import MatricizationSplit, NumericalFailure, random_isometry

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8)).map(
    lambda t: (max(t), min(t)))


def _pair(seed, n, p):
    rng = np.random.default_rng(seed)
    return random_isometry(rng, n, p), rng.standard_normal((n, p))


# tangent projection

@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 10_000))
def test_projection_is_tangent_and_equals_ax(shape, seed):
    x, xbar = _pair(seed, *shape)
    g, a = project_tangent(x, xbar)
    assert np.max(np.abs(g.T @ x + x.T @ g)) <= 1e-10
    assert np.max(np.abs(a @ x - g)) <= 1e-10
    assert np.max(np.abs(a + a.T)) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(shapes, st.integers(0, 10_000))
def test_radial_directions_vanish(shape, seed):
    x, _ = _pair(seed, *shape)
    s = np.random.default_rng(seed + 1).standard_normal((shape[1], shape[1]))
    g, _ = project_tangent(x, x @ (s + s.T))
    assert np.max(np.abs(g)) <= 1e-12


def test_projection_at_identity_is_antisymmetric_part():
    xbar = np.random.default_rng(0).standard_normal((4, 4))
    g, _ = project_tangent(np.eye(4), xbar)
    assert np.allclose(g, 0.5 * (xbar - xbar.T))
    g, _ = project_tangent(np.eye(4), np.eye(4))
    assert np.array_equal(g, np.zeros((4, 4)))


def test_projection_rejects_non_isometry():
    with pytest.raises(ValueError):
        project_tangent(2 * np.eye(3), np.eye(3))


# retractions

@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_step_is_identity(scheme):
    x, xbar = _pair(1, 6, 3)
    assert np.allclose(retract(x, xbar, 0.0, scheme), x, atol=1e-12)


def test_cayley_rotation_generator():
    a = np.array([[0.0, 1.0], [-1.0, 0.0]])
    got = retract(np.eye(2), None, 2.0, "cayley", generator=a)
    # (I + A)^-1 (I - A) evaluated by hand
    assert np.allclose(got, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)


def test_cayley_singular_reported():
    # I + eta/2 A is never singular for real skew A; force it with a non-skew generator
    with pytest.raises(NumericalFailure, match="reduce the learning rate"):
        retract(np.eye(2), None, 2.0, "cayley", generator=-np.eye(2))


def test_qr_and_svd_formulas():
    x, xbar = _pair(2, 7, 3)
    g, _ = project_tangent(x, xbar)
    q = np.linalg.qr(x - 0.25 * g)[0]
    q = q * np.sign(np.diag(np.linalg.qr(x - 0.25 * g)[1]))
    assert np.allclose(retract(x, xbar, 0.5, "qr"), q)
    u, _, vt = np.linalg.svd(x - 0.5 * g, full_matrices=False)
    assert np.allclose(retract(x, xbar, 0.5, "svd"), u @ vt)


@pytest.mark.parametrize("eta", [0.01, 0.1, 1.0, 5.0])
def test_cayley_variants_agree(eta):
    x, xbar = _pair(3, 8, 3)
    direct = retract(x, xbar, eta, "cayley")
    assert np.max(np.abs(retract(x, xbar, eta, "cayley_smw") - direct)) <= 1e-8
    if eta <= 0.1:
        it = retract(x, xbar, eta, "cayley_iter", inner_steps=20)
        assert np.max(np.abs(it - direct)) <= 1e-6


@pytest.mark.parametrize("eta", [0.1, 0.5, 1.0])
def test_cayley_direct_preserves_constraint(eta):
    x, xbar = _pair(4, 9, 4)
    assert constraint_error(retract(x, xbar, eta, "cayley")) <= 1e-10


@pytest.mark.parametrize("scheme", SCHEMES)
def test_constraint_survives_1000_random_steps(scheme):
    rng = np.random.default_rng(5)
    x = random_isometry(rng, 8, 3)
    for _ in range(1000):
        x = retract(x, rng.standard_normal(x.shape), float(rng.uniform(0, 0.5)), scheme)
    assert constraint_error(x) <= 1e-8


# momentum

def test_unrolled_momentum_recurrence():
    x0, xbar = _pair(6, 6, 2)
    eta, beta, alpha, eps = 0.3, 0.9, 4.0, 1e-8

    def proj(x, m):
        return m - 0.5 * (x @ x.T @ m + x @ m.T @ x)

    # hand-unrolled two steps
    m = xbar
    g = proj(x0, m)
    a = skew_generator(x0, g)
    e1 = min(eta, alpha / (np.linalg.norm(a) + eps))
    u, _, vt = np.linalg.svd(x0 - e1 * g, full_matrices=False)
    x1 = u @ vt
    m = beta * g + xbar
    g = proj(x1, m)
    a = skew_generator(x1, g)
    e2 = min(eta, alpha / (np.linalg.norm(a) + eps))
    u, _, vt = np.linalg.svd(x1 - e2 * g, full_matrices=False)
    x2 = u @ vt

    y1, m1, f1 = momentum_step(x0, xbar, None, eta, beta, alpha, eps, "svd")
    y2, _, f2 = momentum_step(y1, xbar, m1, eta, beta, alpha, eps, "svd")
    assert (f1, f2) == pytest.approx((e1, e2))
    assert np.allclose(y1, x1, atol=1e-12) and np.allclose(y2, x2, atol=1e-12)


def test_zero_adjoint_leaves_param():
    x, _ = _pair(7, 5, 2)
    y, m, _ = momentum_step(x, np.zeros_like(x), np.zeros_like(x), 1.0, 0.9, 4.0)
    assert np.allclose(y, x) and not np.any(m)


def test_beta_zero_is_projected_gradient():
    x, xbar = _pair(8, 5, 2)
    y, _, eta = momentum_step(x, xbar, np.ones_like(x), 0.2, 0.0, 1e9)
    assert eta == 0.2
    assert np.allclose(y, retract(x, xbar, 0.2, "svd"))


def test_adaptive_rate_caps_large_gradients():
    x, xbar = _pair(9, 5, 2)
    _, _, eta = momentum_step(x, 1e6 * xbar, None, 1.0, 0.9, 4.0)
    assert eta < 1e-4


def test_step_on_tensor_param_and_decay():
    rng = np.random.default_rng(10)
    w = random_isometry(rng, 8, 2).reshape(2, 2, 2, 2)
    param = IsometricParam(w, MatricizationSplit.leading(4, 3))
    state = MomentumState(eta=0.5, decay_period=2, decay_factor=0.5)
    new = step(param, rng.standard_normal(w.shape), state, "qr", key="w")
    assert new.value.shape == w.shape and new.constraint_error() <= 1e-12
    state.tick()
    state.tick()
    assert state.eta == 0.25
    with pytest.raises(ValueError):
        MomentumState(beta_m=1.5)


# Evenbly-Vidal

def test_ev_examples():
    assert np.allclose(ev_update(np.eye(3)), -np.eye(3))
    y = np.diag([2.0, -1.0])
    w = ev_update(y)
    assert np.allclose(w, np.diag([-1.0, 1.0]))
    assert np.trace(w @ y) == pytest.approx(-3.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ev_minimal_against_random_probes(seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((4, 4))
    best = np.trace(ev_update(y) @ y)
    assert best == pytest.approx(-np.sum(np.linalg.svd(y, compute_uv=False)))
    for _ in range(100):
        q = random_isometry(rng, 4, 4)
        assert best <= np.trace(q @ y) + 1e-12


def test_ev_rectangular_is_isometric():
    y = np.random.default_rng(11).standard_normal((3, 7))
    assert constraint_error(ev_update(y)) <= 1e-12


# random mixed schedule

def test_mixed_select_cadence():
    sched = MethodSchedule(cadence=5, seed=1)
    assert [mixed_select(sched, i) for i in range(1, 5)] == ["ev"] * 4
    assert mixed_select(sched, 5) in ("svd", "cayley")
    every = MethodSchedule(cadence=1, seed=1)
    assert all(mixed_select(every, i) != "ev" for i in range(1, 20))
    with pytest.raises(ValueError):
        MethodSchedule(cadence=0)


def test_mixed_select_is_seeded():
    s1, s2 = MethodSchedule(seed=3), MethodSchedule(seed=3)
    a = [mixed_select(s1, 5 * k) for k in range(1, 30)]
    b = [mixed_select(s2, 5 * k) for k in range(1, 30)]
    assert a == b and {"svd", "cayley"} <= set(a)


# soft constraints

def test_soft_loss_examples():
    x, _ = _pair(12, 6, 3)
    u = random_isometry(np.random.default_rng(1), 4, 4)
    assert constraint_deviation([x], [u])[0] <= 1e-15
    assert soft_loss(-1.0, [x], [u], 10.0) == pytest.approx(-1.0)
    assert constraint_deviation([np.zeros((2, 2))], [])[0] == pytest.approx(0.5)
    assert soft_loss(-1.0, [np.zeros((2, 2))], [], 0.0) == -1.0


def test_soft_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    w = random_isometry(rng, 6, 3) + 0.1 * rng.standard_normal((6, 3))
    u = np.eye(4) + 0.1 * rng.standard_normal((4, 4))
    _, gw, gu = constraint_deviation([w], [u])
    h = 1e-7
    for mat, grad, idx in [(w, gw[0], 0), (u, gu[0], 1)]:
        fd = np.zeros_like(mat)
        for i in np.ndindex(mat.shape):
            p, m = mat.copy(), mat.copy()
            p[i] += h
            m[i] -= h
            args_p = ([p], [u]) if idx == 0 else ([w], [p])
            args_m = ([m], [u]) if idx == 0 else ([w], [m])
            fd[i] = (constraint_deviation(*args_p)[0] - constraint_deviation(*args_m)[0]) / (2 * h)
        assert np.max(np.abs(fd - grad)) <= 1e-6


def _replay(state, errs):
    # hand simulation of the three rules
    lam, thr, out = None, state.threshold, []
    for it, t in enumerate(errs, start=1):
        if it < state.warmup:
            lam = state.lam_small
        elif it == state.warmup:
            lam = state.lam_max
        elif t < thr:
            lam = max(lam * state.decay, state.lam_min)
            thr = max(thr * state.threshold_decay, state.threshold_min)
        elif t > thr:
            lam = min(lam * state.growth, state.lam_max)
        out.append(lam)
    return out


def test_tune_lambda_rule_replay():
    errs = [1e-2 if k % 3 else 1e-5 for k in range(200)]
    ref = _replay(SoftConstraintState(warmup=5), errs)
    state = SoftConstraintState(warmup=5)
    got = [tune_lambda(state, t).lam for t in errs]
    assert got == pytest.approx(ref, rel=1e-15)
    assert all(state.lam_min <= v <= state.lam_max for v in got[5:])


def test_tune_lambda_clamps():
    s = SoftConstraintState(warmup=1, lam_min=1.0, lam_max=50.0)
    tune_lambda(s, 1.0)
    for _ in range(500):
        tune_lambda(s, 1.0)
    assert s.lam == 50.0
    for _ in range(2000):
        tune_lambda(s, 0.0)
    assert s.lam == 1.0
    with pytest.raises(ValueError):
        SoftConstraintState(lam_min=2.0, lam_max=1.0)


def test_euclidean_rules():
    x, g = np.ones(3), np.full(3, 2.0)
    opt = EuclideanOptimizer(rule="rmsprop", eta=0.1, beta_v=0.0, eps=0.0)
    assert np.allclose(opt.update("a", x, g), x - 0.1)
    mom = EuclideanOptimizer(rule="momentum", eta=0.1, beta_m=0.5)
    mom.update("a", x, g)
    assert np.allclose(mom.update("a", x, g), x - (0.5 * 0.2 + 0.2))
    with pytest.raises(ValueError):
        EuclideanOptimizer(rule="adam").update("a", x, g)
