import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm, null_space

from sphereflow.errors import ConfigError, IntegrationError
from sphereflow.field import hamiltonian
from sphereflow.flow import (
    IntegratorConfig,
    backprop_discretize,
    flow_compose_check,
    integrate_backward_adjoint,
    integrate_cotangent_lift,
    integrate_forward,
)
from sphereflow.geometry import geodesic_distance, project_tangent, sample_uniform
from sphereflow.net import init_params, linear_net, random_net, rotation_generator

seeds = st.integers(0, 2**31 - 1)


def rand_net(seed, n=2, scale=1.0):
    return random_net((n + 2, 10, 10, n + 1), seed=seed, scale=scale)


def test_config_validation_and_reverse():
    with pytest.raises(ConfigError):
        IntegratorConfig(0)
    with pytest.raises(ConfigError):
        IntegratorConfig(2.5)
    cfg = IntegratorConfig(10, 0.0, 1.0).reversed()
    assert (cfg.t0, cfg.t1, cfg.h) == (1.0, 0.0, -0.1)


def test_zero_head_flow_is_identity():
    net = init_params((4, 10, 10, 3), seed=0)
    q0 = sample_uniform(np.random.default_rng(0), 5, 2)
    res = integrate_forward(net, q0)
    assert np.allclose(res.q1, q0, atol=1e-15) and not res.delta_log_density.any()


def test_single_point_and_batch_shapes_agree():
    net = rand_net(1)
    q0 = sample_uniform(np.random.default_rng(1), 3, 2)
    batch = integrate_forward(net, q0, IntegratorConfig(20))
    single = integrate_forward(net, q0[1], IntegratorConfig(20))
    assert single.q1.shape == (3,) and isinstance(single.delta_log_density, float)
    assert np.allclose(single.q1, batch.q1[1], atol=1e-15)


@settings(max_examples=15)
@given(seeds, st.sampled_from([2, 3]))
def test_flow_stays_on_sphere(seed, n):
    net = rand_net(seed, n)
    q0 = sample_uniform(np.random.default_rng(seed), 8, n)
    q1 = integrate_forward(net, q0, IntegratorConfig(30)).q1
    assert np.allclose(np.linalg.norm(q1, axis=1), 1.0, atol=1e-14)


@pytest.mark.parametrize("m", [3, 4])
def test_skew_field_flow_matches_matrix_exponential(m):
    rng = np.random.default_rng(m)
    B = rng.standard_normal((m, m))
    A = B - B.T
    net = linear_net(A)
    q0 = sample_uniform(rng, 6, m - 1)
    res = integrate_forward(net, q0, IntegratorConfig(100))
    exact = q0 @ expm(A).T
    assert np.abs(res.q1 - exact).max() < 1e-6
    assert np.abs(res.delta_log_density).max() < 1e-8


def test_quarter_turn():
    net = linear_net(rotation_generator(3, 0, 1, np.pi / 2))
    res = integrate_forward(net, np.array([1.0, 0.0, 0.0]), IntegratorConfig(100))
    assert np.allclose(res.q1, [0.0, 1.0, 0.0], atol=1e-8)


@pytest.mark.parametrize("n", [2, 3])
def test_log_density_change_matches_tangent_jacobian(n):
    # delta_log_density = -log |det D phi| restricted to tangent spaces
    rng = np.random.default_rng(20 + n)
    net = rand_net(20 + n, n)
    cfg = IntegratorConfig(200)
    eps = 1e-6
    for q0 in sample_uniform(rng, 4, n):
        res = integrate_forward(net, q0, cfg)
        B0 = null_space(q0[None, :])
        B1 = null_space(res.q1[None, :])
        cols = []
        for v in B0.T:
            plus = integrate_forward(net, (q0 + eps * v) / np.linalg.norm(q0 + eps * v), cfg).q1
            minus = integrate_forward(net, (q0 - eps * v) / np.linalg.norm(q0 - eps * v), cfg).q1
            cols.append(B1.T @ (plus - minus) / (2 * eps))
        logdet = np.log(abs(np.linalg.det(np.stack(cols, axis=1))))
        assert res.delta_log_density == pytest.approx(-logdet, abs=1e-6)


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
def test_same_time_flow_is_exact_identity(t):
    net = rand_net(4)
    q0 = sample_uniform(np.random.default_rng(4), 8, 2)
    res = integrate_forward(net, q0, IntegratorConfig(50, t, t))
    assert np.array_equal(res.q1, q0) and not res.delta_log_density.any()
    assert flow_compose_check(net, q0, t, t, 1.0).max() == 0.0


@settings(max_examples=10)
@given(seeds, st.floats(0.1, 0.9))
def test_composition_law(seed, s):
    net = rand_net(seed)
    q0 = sample_uniform(np.random.default_rng(seed), 8, 2)
    assert flow_compose_check(net, q0, s, 0.0, 1.0, IntegratorConfig(200)).max() <= 1e-6


@settings(max_examples=10)
@given(seeds)
def test_forward_backward_round_trip(seed):
    net = rand_net(seed)
    q0 = sample_uniform(np.random.default_rng(seed), 8, 2)
    cfg = IntegratorConfig(100)
    fwd = integrate_forward(net, q0, cfg)
    back = integrate_forward(net, fwd.q1, cfg.reversed())
    assert geodesic_distance(back.q1, q0).max() <= 1e-6
    assert np.abs(back.delta_log_density + fwd.delta_log_density).max() <= 1e-6


def test_non_finite_state_raises_with_step():
    net = random_net((4, 3), seed=0, scale=1e200)
    with pytest.raises(IntegrationError) as info:
        integrate_forward(net, np.array([0.0, 0.0, 1.0]), IntegratorConfig(10))
    assert info.value.step is not None


def loss_setup(seed, n=2, batch=3):
    rng = np.random.default_rng(seed)
    net = rand_net(seed, n, scale=0.5)
    q0 = sample_uniform(rng, batch, n)
    gq = rng.standard_normal((batch, n + 1))
    gl = rng.standard_normal(batch)

    def loss(theta, q=q0, cfg=IntegratorConfig(40)):
        res = integrate_forward(net.with_params(theta), q, cfg)
        return np.sum(res.q1 * gq) + np.sum(res.delta_log_density * gl)

    return net, q0, gq, gl, loss


def test_discretize_param_grad_matches_finite_differences():
    net, q0, gq, gl, loss = loss_setup(0)
    grad = backprop_discretize(net, q0, IntegratorConfig(40), gq, gl).param_grad
    rng = np.random.default_rng(1)
    for _ in range(5):
        d = rng.standard_normal(net.n_params)
        fd = (loss(net.theta + 1e-5 * d) - loss(net.theta - 1e-5 * d)) / 2e-5
        assert grad @ d == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("mode", ["discretize", "adjoint"])
def test_initial_point_gradient_matches_finite_differences(mode):
    net, q0, gq, gl, loss = loss_setup(2)
    cfg = IntegratorConfig(40)
    if mode == "discretize":
        g0 = backprop_discretize(net, q0, cfg, gq, gl).grad_q0
    else:
        g0 = integrate_backward_adjoint(net, integrate_forward(net, q0, cfg).q1, gq, gl, cfg).grad_q0
    # adjoint projects at its re-integrated base point, which matches q0 to ~1e-10
    assert np.allclose(np.sum(g0 * q0, axis=1), 0.0, atol=1e-12 if mode == "discretize" else 1e-8)
    rng = np.random.default_rng(3)
    eps = 1e-6
    V = rng.standard_normal(q0.shape)
    V -= np.sum(V * q0, axis=1, keepdims=True) * q0
    plus = q0 + eps * V
    minus = q0 - eps * V
    fd = (loss(net.theta, plus / np.linalg.norm(plus, axis=1, keepdims=True))
          - loss(net.theta, minus / np.linalg.norm(minus, axis=1, keepdims=True))) / (2 * eps)
    assert np.sum(g0 * V) == pytest.approx(fd, rel=1e-5)


@settings(max_examples=5)
@given(seeds, st.sampled_from([2, 3]))
def test_adjoint_matches_discretize(seed, n):
    net, q0, gq, gl, _ = loss_setup(seed, n)
    cfg = IntegratorConfig(100)
    disc = backprop_discretize(net, q0, cfg, gq, gl)
    adj = integrate_backward_adjoint(net, integrate_forward(net, q0, cfg).q1, gq, gl, cfg)
    assert np.linalg.norm(adj.param_grad - disc.param_grad) <= 1e-4 * np.linalg.norm(disc.param_grad)
    assert np.allclose(adj.grad_q0, disc.grad_q0, rtol=1e-4, atol=1e-8)


def test_adjoint_with_stored_trajectory():
    net, q0, gq, gl, _ = loss_setup(6)
    cfg = IntegratorConfig(100, store_trajectory=True)
    fwd = integrate_forward(net, q0, cfg)
    assert len(fwd.trajectory) == 101
    stored = integrate_backward_adjoint(net, fwd.q1, gq, gl, cfg, trajectory=fwd.trajectory)
    disc = backprop_discretize(net, q0, cfg, gq, gl)
    assert np.linalg.norm(stored.param_grad - disc.param_grad) <= 1e-4 * np.linalg.norm(disc.param_grad)


def unit_covector(rng, q):
    p = project_tangent(q, rng.standard_normal(q.shape))
    return p / np.linalg.norm(p)


def lift_drift(net, q, p, steps):
    q1, p1 = integrate_cotangent_lift(net, q, p, IntegratorConfig(steps))
    return abs(hamiltonian(net, 0.0, q1, p1) - hamiltonian(net, 0.0, q, p))


def test_hamiltonian_drift_is_fourth_order_in_step():
    rng = np.random.default_rng(9)
    for seed in range(3):
        net = rand_net(seed)
        net.layers()[0][0][:, 0] = 0.0
        q = sample_uniform(rng, 1, 2)[0]
        p = unit_covector(rng, q)
        d100, d200 = lift_drift(net, q, p, 100), lift_drift(net, q, p, 200)
        assert 16.0 / 1.5 < d100 / d200 < 16.0 * 1.5


def test_hamiltonian_drift_small_for_moderate_net():
    rng = np.random.default_rng(10)
    net = random_net((4, 10, 10, 3), seed=10, scale=0.5)
    net.layers()[0][0][:, 0] = 0.0
    q = sample_uniform(rng, 1, 2)[0]
    assert lift_drift(net, q, unit_covector(rng, q), 100) <= 1e-6


def test_rk4_global_error_is_fourth_order():
    net = rand_net(11)
    q0 = sample_uniform(np.random.default_rng(11), 16, 2)
    ref = integrate_forward(net, q0, IntegratorConfig(2000)).q1
    steps = np.array([25, 50, 100, 200])
    errs = [geodesic_distance(integrate_forward(net, q0, IntegratorConfig(int(s))).q1, ref).max() for s in steps]
    slope = np.polyfit(np.log(1.0 / steps), np.log(errs), 1)[0]
    assert abs(slope - 4.0) <= 0.3
