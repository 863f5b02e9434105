"""Tangent vector fields X_t = sum_i f_i(t, .) grad z_i on S^n.

``grad z_i = e_i - z_i z`` are the projected coordinate fields, so the
field is ``X(z) = f(z) - <f(z), z> z``. The same formula is used off the
sphere as the ambient extension, which is what the integrator and the
cotangent lift evaluate.

Single-point functions here go through :mod:`sphereflow.net`; the batched
``*_batch`` functions go through the fused kernels.
"""
from typing import NamedTuple

import numpy as np

from . import kernels
from . import net as fnet
from .geometry import generator_divergences, generator_fields


class FieldEval(NamedTuple):
    velocity: np.ndarray
    divergence: float


class CotangentState(NamedTuple):
    q: np.ndarray
    p: np.ndarray


def eval_field(net, t, q):
    q = np.asarray(q, dtype=float)
    f = fnet.forward(net, t, q)
    # sum_i f_i (e_i - q_i q)
    return generator_fields(q).T @ f


def eval_divergence(net, t, q):
    """div X = sum_i grad z_i(f_i) + f_i div grad z_i, using one jvp per generator."""
    q = np.asarray(q, dtype=float)
    gens = generator_fields(q)
    f = fnet.forward(net, t, q)
    directional = sum(fnet.jvp(net, t, q, g)[i] for i, g in enumerate(gens))
    return float(directional + f @ generator_divergences(q))


def evaluate(net, t, q):
    return FieldEval(eval_field(net, t, q), eval_divergence(net, t, q))


def cotangent_lift_rhs(net, t, state):
    """Base velocity and covector velocity of the cotangent lift of the ambient field.

    With X(z) = f - <f,z> z the ambient Jacobian is
    J = J_f - z (J_f^T z + f)^T - <f,z> I, hence
    J^T p = J_f^T (p - <z,p> z) - <z,p> f - <f,z> p and dp = -J^T p.
    """
    q = np.asarray(state.q, dtype=float)
    p = np.asarray(state.p, dtype=float)
    dq = eval_field(net, t, q)
    f = fnet.forward(net, t, q)
    zp = q @ p
    pulled, _, _ = fnet.vjp(net, t, q, p - zp * q)
    jtp = pulled - zp * f - (f @ q) * p
    return dq, -jtp


def hamiltonian(net, t, q, p):
    """H(q, p) = <p, X_t(q)>, conserved by the lift of a time-independent field."""
    return float(np.asarray(p) @ eval_field(net, t, q))


# -- batched, kernel-backed ---------------------------------------------------

def field_div_batch(net, t, Q):
    return kernels.field_div(net.layer_sizes, net.theta, t, Q)


def field_div_vjp_batch(net, t, Q, gX, gD):
    return kernels.field_div_vjp(net.layer_sizes, net.theta, t, Q, gX, gD)


def lift_rhs_batch(net, t, Q, P, logdet_weight=0.0):
    """Right-hand side of the augmented adjoint system for a batch.

    Returns ``(dq, dp, dtheta)`` where ``dp = -(J^T p - w grad div)`` and
    ``dtheta = -(p^T dX/dtheta - w d div/dtheta)`` summed over the batch;
    ``w`` is the loss weight on the log-density channel.
    """
    w = np.broadcast_to(np.asarray(logdet_weight, dtype=float), (Q.shape[0],))
    X, _, gQ, _, gtheta = field_div_vjp_batch(net, t, Q, P, -w)
    return X, -gQ, -gtheta
