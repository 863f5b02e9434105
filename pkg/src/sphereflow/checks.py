"""Self-diagnostics on random instances: divergence, gradients, flow laws.

Each check returns :class:`CheckResult` rows carrying the observed error
next to the tolerance it is held to.
"""
from dataclasses import dataclass

import numpy as np

from .field import eval_divergence, eval_field, hamiltonian
from .flow import (
    IntegratorConfig,
    backprop_discretize,
    flow_compose_check,
    integrate_backward_adjoint,
    integrate_cotangent_lift,
    integrate_forward,
)
from .geometry import chart_divergence, geodesic_distance, in_chart_interior, project_tangent, sample_uniform
from .net import linear_net, random_net, rotation_generator

SCOPES = ("divergence", "gradients", "flow-laws")


@dataclass
class CheckResult:
    name: str
    observed: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.observed <= self.tolerance)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def sample_chart_points(rng, count, n, margin=0.1):
    out = []
    while len(out) < count:
        q = sample_uniform(rng, 1, n)[0]
        if in_chart_interior(q, margin):
            out.append(q)
    return np.array(out)


def divergence_errors(count, seed=0, n=2, hidden=(10, 10), scale=1.0):
    """Closed-form divergence vs the hyperspherical-chart finite-difference oracle."""
    rng = np.random.default_rng(seed)
    errs = []
    for k, q in enumerate(sample_chart_points(rng, count, n)):
        net = random_net((n + 2, *hidden, n + 1), seed=seed * 100003 + k, scale=scale)
        t = rng.uniform(0.0, 1.0)
        exact = eval_divergence(net, t, q)
        oracle = chart_divergence(lambda x: eval_field(net, t, x), q)
        errs.append(abs(exact - oracle))
    return np.array(errs)


def adjoint_vs_discretize(count, seed=0, n=2, steps=100, batch=4, scale=0.5):
    rng = np.random.default_rng(seed)
    cfg = IntegratorConfig(steps)
    errs = []
    for k in range(count):
        net = random_net((n + 2, 10, 10, n + 1), seed=seed * 7919 + k, scale=scale)
        q0 = sample_uniform(rng, batch, n)
        gq = rng.standard_normal((batch, n + 1))
        gl = rng.standard_normal(batch)
        disc = backprop_discretize(net, q0, cfg, gq, gl)
        q1 = integrate_forward(net, q0, cfg).q1
        adj = integrate_backward_adjoint(net, q1, gq, gl, cfg)
        errs.append(max(rel_err(adj.param_grad, disc.param_grad), rel_err(adj.grad_q0, disc.grad_q0)))
    return np.array(errs)


def discretize_vs_fd(count, directions, seed=0, n=2, steps=100, batch=4, scale=0.5, eps=1e-4):
    """Relative error of <param_grad, d> against central differences of the loss."""
    rng = np.random.default_rng(seed)
    cfg = IntegratorConfig(steps)
    errs = []
    for k in range(count):
        net = random_net((n + 2, 10, 10, n + 1), seed=seed * 104729 + k, scale=scale)
        q0 = sample_uniform(rng, batch, n)
        gq = rng.standard_normal((batch, n + 1))
        gl = rng.standard_normal(batch)

        def loss(theta):
            res = integrate_forward(net.with_params(theta), q0, cfg)
            return np.sum(res.q1 * gq) + np.sum(res.delta_log_density * gl)

        grad = backprop_discretize(net, q0, cfg, gq, gl).param_grad
        for _ in range(directions):
            d = rng.standard_normal(net.n_params)
            d /= np.linalg.norm(d)
            fd = (loss(net.theta + eps * d) - loss(net.theta - eps * d)) / (2 * eps)
            errs.append(abs(grad @ d - fd) / max(abs(fd), 1e-12))
    return np.array(errs)


def rotation_oracle(steps=100):
    """Quarter turn about e_3: returns (point error, |delta log density|)."""
    net = linear_net(rotation_generator(3, 0, 1, np.pi / 2))
    res = integrate_forward(net, np.array([1.0, 0.0, 0.0]), IntegratorConfig(steps))
    return float(np.linalg.norm(res.q1 - np.array([0.0, 1.0, 0.0]))), abs(res.delta_log_density)


def hamiltonian_drift(count, seed=0, n=2, steps=100):
    """|H(end) - H(start)| for time-independent nets, params in [-1, 1], unit tangent covector."""
    rng = np.random.default_rng(seed)
    drifts = []
    for k in range(count):
        net = random_net((n + 2, 10, 10, n + 1), seed=seed * 31 + k, scale=1.0)
        net.layers()[0][0][:, 0] = 0.0  # drop the time input
        q = sample_uniform(rng, 1, n)[0]
        p = project_tangent(q, rng.standard_normal(n + 1))
        p /= np.linalg.norm(p)
        q1, p1 = integrate_cotangent_lift(net, q, p, IntegratorConfig(steps))
        drifts.append(abs(hamiltonian(net, 0.0, q1, p1) - hamiltonian(net, 0.0, q, p)))
    return np.array(drifts)


def round_trip_errors(count, seed=0, n=2, steps=100, scale=1.0):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(count):
        net = random_net((n + 2, 10, 10, n + 1), seed=seed * 17 + k, scale=scale)
        q0 = sample_uniform(rng, 8, n)
        cfg = IntegratorConfig(steps)
        q1 = integrate_forward(net, q0, cfg).q1
        back = integrate_forward(net, q1, cfg.reversed()).q1
        errs.append(geodesic_distance(back, q0).max())
    return np.array(errs)


def composition_errors(count, seed=0, n=2, total_steps=200, scale=1.0):
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(count):
        net = random_net((n + 2, 10, 10, n + 1), seed=seed * 13 + k, scale=scale)
        q0 = sample_uniform(rng, 8, n)
        s = rng.uniform(0.2, 0.8)
        errs.append(flow_compose_check(net, q0, s, 0.0, 1.0, IntegratorConfig(total_steps)).max())
    return np.array(errs)


def identity_error(seed=0, n=2):
    rng = np.random.default_rng(seed)
    net = random_net((n + 2, 10, 10, n + 1), seed=seed)
    q0 = sample_uniform(rng, 8, n)
    return float(flow_compose_check(net, q0, 0.3, 0.3, 1.0, IntegratorConfig(100)).max())


def run_checks(scope="all", seed=0):
    scopes = SCOPES if scope == "all" else (scope,)
    if any(s not in SCOPES for s in scopes):
        raise ValueError(f"unknown check scope {scope!r}; choose from {SCOPES + ('all',)}")
    out = []
    if "divergence" in scopes:
        out.append(CheckResult("divergence vs chart oracle, S^2 (max abs)", divergence_errors(20, seed).max(), 1e-4))
        out.append(CheckResult("divergence vs chart oracle, S^3 (max abs)", divergence_errors(5, seed, n=3).max(), 1e-4))
    if "gradients" in scopes:
        out.append(CheckResult("adjoint vs discretize (max rel)", adjoint_vs_discretize(5, seed).max(), 1e-4))
        out.append(CheckResult("discretize vs finite differences (max rel)", discretize_vs_fd(2, 2, seed).max(), 1e-4))
    if "flow-laws" in scopes:
        pos, dl = rotation_oracle()
        out.append(CheckResult("rotation flow vs exp(tA) q0", pos, 1e-6))
        out.append(CheckResult("rotation |delta log density|", dl, 1e-8))
        out.append(CheckResult("phi^{t,t} = Id", identity_error(seed), 0.0))
        out.append(CheckResult("composition discrepancy", composition_errors(3, seed).max(), 1e-6))
        out.append(CheckResult("forward/backward round trip", round_trip_errors(3, seed).max(), 1e-6))
        out.append(CheckResult("Hamiltonian drift", hamiltonian_drift(3, seed).max(), 1e-6))
    return out
