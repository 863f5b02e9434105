"""Fixed-step RK4 flows on the sphere with log-density transport and gradients.

Every function accepts a single point ``(m,)`` or a batch ``(B, m)`` and
returns results of the matching shape. Steps are classical RK4 on the
ambient extension of the field followed by renormalization.

Two gradient routes are provided and cross-check each other:

* :func:`backprop_discretize` differentiates the exact discrete recursion;
* :func:`integrate_backward_adjoint` integrates the cotangent lift (plus the
  log-density channel) backwards in time, re-integrating the base point.
"""
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError, IntegrationError
from .field import field_div_batch, field_div_vjp_batch, lift_rhs_batch
from .geometry import geodesic_distance, project_tangent


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 100
    t0: float = 0.0
    t1: float = 1.0
    # adjoint pass reuses stored forward knots instead of re-integrating q
    store_trajectory: bool = False

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")

    @property
    def h(self):
        return (self.t1 - self.t0) / self.steps

    def reversed(self):
        return replace(self, t0=self.t1, t1=self.t0)


class ForwardResult(NamedTuple):
    q1: np.ndarray
    delta_log_density: np.ndarray
    trajectory: Optional[list] = None


class BackwardResult(NamedTuple):
    grad_q0: np.ndarray
    param_grad: np.ndarray


def _as_batch(q):
    q = np.asarray(q, dtype=float)
    return np.atleast_2d(q).copy(), q.ndim == 1


def _finite_or_raise(step, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise IntegrationError("non-finite state during integration", step)


def _rk4_forward(net, Q, cfg, record=False):
    h = cfg.h
    ell = np.zeros(Q.shape[0])
    tape = [] if record else None
    knots = [(cfg.t0, Q.copy())] if cfg.store_trajectory else None
    if cfg.t0 == cfg.t1:
        # phi^{t,t} is the identity; skip steps so renormalization cannot move q
        return Q, ell, tape, knots
    for k in range(cfg.steps):
        t = cfg.t0 + k * h
        k1, d1 = field_div_batch(net, t, Q)
        Z2 = Q + 0.5 * h * k1
        k2, d2 = field_div_batch(net, t + 0.5 * h, Z2)
        Z3 = Q + 0.5 * h * k2
        k3, d3 = field_div_batch(net, t + 0.5 * h, Z3)
        Z4 = Q + h * k3
        k4, d4 = field_div_batch(net, t + h, Z4)
        Y = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ell = ell - (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        r = np.linalg.norm(Y, axis=1, keepdims=True)
        Qn = Y / r
        _finite_or_raise(k, Qn, ell)
        if record:
            tape.append((Q, Z2, Z3, Z4, r, Qn))
        Q = Qn
        if knots is not None:
            knots.append((cfg.t0 + (k + 1) * h, Q.copy()))
    return Q, ell, tape, knots


def integrate_forward(net, q0, cfg=IntegratorConfig()):
    """Push ``q0`` from t0 to t1; ``delta_log_density`` is -int div X_t along the path."""
    Q, single = _as_batch(q0)
    Q1, ell, _, knots = _rk4_forward(net, Q, cfg)
    if single:
        return ForwardResult(Q1[0], float(ell[0]), knots and [(t, q[0]) for t, q in knots])
    return ForwardResult(Q1, ell, knots)


def forward_with_tape(net, q0, cfg=IntegratorConfig()):
    """Batched forward pass that keeps every stage point for :func:`backprop_discretize`."""
    Q, _ = _as_batch(q0)
    Q1, ell, tape, _ = _rk4_forward(net, Q, cfg, record=True)
    return Q1, ell, tape


def backprop_discretize(net, q0, cfg=IntegratorConfig(), loss_grad_q1=None, loss_grad_logdet=0.0, tape=None):
    """Reverse-mode gradient of the discrete RK4 + retraction map.

    ``loss_grad_q1`` / ``loss_grad_logdet`` are dL/dq1 and dL/d(delta_log_density).
    Pass the ``tape`` from :func:`forward_with_tape` to skip re-running the forward pass.
    """
    Q0, single = _as_batch(q0)
    if tape is None:
        _, _, tape = forward_with_tape(net, Q0, cfg)
    B, m = Q0.shape
    gQ = np.zeros((B, m)) if loss_grad_q1 is None else np.broadcast_to(loss_grad_q1, (B, m)).astype(float)
    gl = np.broadcast_to(np.asarray(loss_grad_logdet, dtype=float), (B,))
    h = cfg.h
    gtheta = np.zeros_like(net.theta)
    for k in range(len(tape) - 1, -1, -1):
        Q, Z2, Z3, Z4, r, Qn = tape[k]
        t = cfg.t0 + k * h
        gY = (gQ - np.sum(gQ * Qn, axis=1, keepdims=True) * Qn) / r
        gk1, gk4 = (h / 6.0) * gY, (h / 6.0) * gY
        gk2, gk3 = (h / 3.0) * gY, (h / 3.0) * gY
        gd_outer, gd_inner = -(h / 6.0) * gl, -(h / 3.0) * gl
        _, _, gz, _, gth = field_div_vjp_batch(net, t + h, Z4, gk4, gd_outer)
        gQ = gY + gz
        gk3 = gk3 + h * gz
        gtheta += gth
        _, _, gz, _, gth = field_div_vjp_batch(net, t + 0.5 * h, Z3, gk3, gd_inner)
        gQ += gz
        gk2 = gk2 + 0.5 * h * gz
        gtheta += gth
        _, _, gz, _, gth = field_div_vjp_batch(net, t + 0.5 * h, Z2, gk2, gd_inner)
        gQ += gz
        gk1 = gk1 + 0.5 * h * gz
        gtheta += gth
        _, _, gz, _, gth = field_div_vjp_batch(net, t, Q, gk1, gd_outer)
        gQ += gz
        gtheta += gth
    grad_q0 = project_tangent(Q0, gQ)
    return BackwardResult(grad_q0[0] if single else grad_q0, gtheta)


def integrate_backward_adjoint(net, q1, loss_grad_q1, loss_grad_logdet=0.0, cfg=IntegratorConfig(), trajectory=None):
    """Pull (dL/dq1, dL/d delta_log_density) back to (dL/dq0, dL/dtheta) with the adjoint ODE.

    Integrates from t1 to t0 the base point, its covector under the cotangent
    lift (plus the divergence-gradient forcing) and the parameter accumulator.
    With ``cfg.store_trajectory`` and a forward ``trajectory`` the base point is
    read from the stored knots at the start of each step instead.
    """
    Q, single = _as_batch(q1)
    B, m = Q.shape
    P = np.broadcast_to(np.asarray(loss_grad_q1, dtype=float), (B, m)).copy()
    w = np.broadcast_to(np.asarray(loss_grad_logdet, dtype=float), (B,))
    G = np.zeros_like(net.theta)
    knots = None
    if cfg.store_trajectory and trajectory is not None:
        knots = [np.atleast_2d(q) for _, q in trajectory]
    h = -cfg.h
    for k in range(cfg.steps if h != 0.0 else 0):
        t = cfg.t1 + k * h
        if knots is not None:
            Q = knots[cfg.steps - k]
        dq1, dp1, dg1 = lift_rhs_batch(net, t, Q, P, w)
        dq2, dp2, dg2 = lift_rhs_batch(net, t + 0.5 * h, Q + 0.5 * h * dq1, P + 0.5 * h * dp1, w)
        dq3, dp3, dg3 = lift_rhs_batch(net, t + 0.5 * h, Q + 0.5 * h * dq2, P + 0.5 * h * dp2, w)
        dq4, dp4, dg4 = lift_rhs_batch(net, t + h, Q + h * dq3, P + h * dp3, w)
        Y = Q + (h / 6.0) * (dq1 + 2.0 * dq2 + 2.0 * dq3 + dq4)
        Q = Y / np.linalg.norm(Y, axis=1, keepdims=True)
        P = P + (h / 6.0) * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4)
        G = G + (h / 6.0) * (dg1 + 2.0 * dg2 + 2.0 * dg3 + dg4)
        _finite_or_raise(k, Q, P, G)
    if knots is not None:
        Q = knots[0]
    grad_q0 = project_tangent(Q, P)
    return BackwardResult(grad_q0[0] if single else grad_q0, G)


def _segment(net, Q, a, b, rate):
    if a == b:
        return Q
    steps = max(1, int(round(rate * abs(b - a))))
    return integrate_forward(net, Q, IntegratorConfig(steps, a, b)).q1


def flow_compose_check(net, q0, s, t, r, cfg=IntegratorConfig()):
    """Distance between phi^{r,s}(phi^{s,t}(q0)) and phi^{r,t}(q0).

    phi^{b,a} maps a point at time a to time b. Step counts are proportional
    to interval length at the density ``cfg.steps / |cfg.t1 - cfg.t0|``.
    """
    rate = cfg.steps / abs(cfg.t1 - cfg.t0)
    two_leg = _segment(net, _segment(net, q0, t, s, rate), s, r, rate)
    direct = _segment(net, q0, t, r, rate)
    return geodesic_distance(two_leg, direct)


def integrate_cotangent_lift(net, q0, p0, cfg=IntegratorConfig()):
    """Flow (q, p) forward under the cotangent lift: dq = X, dp = -J^T p."""
    Q, single = _as_batch(q0)
    P = np.broadcast_to(np.asarray(p0, dtype=float), Q.shape).copy()
    h = cfg.h
    for k in range(cfg.steps):
        t = cfg.t0 + k * h
        dq1, dp1, _ = lift_rhs_batch(net, t, Q, P)
        dq2, dp2, _ = lift_rhs_batch(net, t + 0.5 * h, Q + 0.5 * h * dq1, P + 0.5 * h * dp1)
        dq3, dp3, _ = lift_rhs_batch(net, t + 0.5 * h, Q + 0.5 * h * dq2, P + 0.5 * h * dp2)
        dq4, dp4, _ = lift_rhs_batch(net, t + h, Q + h * dq3, P + h * dp3)
        Y = Q + (h / 6.0) * (dq1 + 2.0 * dq2 + 2.0 * dq3 + dq4)
        Q = Y / np.linalg.norm(Y, axis=1, keepdims=True)
        P = P + (h / 6.0) * (dp1 + 2.0 * dp2 + 2.0 * dp3 + dp4)
        _finite_or_raise(k, Q, P)
    return (Q[0], P[0]) if single else (Q, P)
