"""Batched numpy kernels: field, divergence and their fused reverse pass.

Shapes: ``Q`` is (B, m); weights follow the flat layout of
:class:`sphereflow.net.CoefficientNet`.
"""
import numpy as np

from ..net import layer_offsets


def _unpack(sizes, theta):
    w_off, b_off = layer_offsets(sizes)
    out = []
    for w0, b0, i, o in zip(w_off, b_off, sizes[:-1], sizes[1:]):
        out.append((theta[w0:w0 + o * i].reshape(o, i), theta[b0:b0 + o]))
    return out


def _forward(layers, t, Q):
    B, m = Q.shape
    G = np.eye(m)[None, :, :] - Q[:, :, None] * Q[:, None, :]
    u = np.empty((B, m + 1))
    u[:, 0] = t
    u[:, 1:] = Q
    W, b = layers[0]
    a = u @ W.T + b
    A = np.einsum("oi,bij->boj", W[:, 1:], G)
    hs, ss, As, Ts = [u], [], [], []
    for W, b in layers[1:]:
        h = np.tanh(a)
        s = 1.0 - h * h
        T = s[:, :, None] * A
        hs.append(h)
        ss.append(s)
        As.append(A)
        Ts.append(T)
        a = h @ W.T + b
        A = np.einsum("oi,bij->boj", W, T)
    return G, hs, ss, As, Ts, a, A


def field_div(sizes, theta, t, Q):
    """Velocity X = f - <f,q> q and divergence tr(J_f P) - n <f,q> at each row of Q."""
    layers = _unpack(sizes, theta)
    _, _, _, _, _, f, F = _forward(layers, t, Q)
    n = Q.shape[1] - 1
    c = np.sum(f * Q, axis=1)
    X = f - c[:, None] * Q
    D = np.trace(F, axis1=1, axis2=2) - n * c
    return X, D


def field_div_vjp(sizes, theta, t, Q, gX, gD):
    """Reverse pass of (X, div) against cotangents (gX, gD).

    Returns ``X, D, gQ, gT, gtheta`` where gtheta is summed over the batch.
    """
    layers = _unpack(sizes, theta)
    G, hs, ss, As, Ts, f, F = _forward(layers, t, Q)
    B, m = Q.shape
    n = m - 1
    c = np.sum(f * Q, axis=1)
    X = f - c[:, None] * Q
    D = np.trace(F, axis1=1, axis2=2) - n * c

    gc = -np.sum(gX * Q, axis=1) - n * gD
    ga = gX + gc[:, None] * Q
    gQ = -c[:, None] * gX + gc[:, None] * f
    gA = gD[:, None, None] * np.eye(m)[None]

    gtheta = np.zeros_like(theta)
    glayers = _unpack(sizes, gtheta)
    for k in range(len(layers) - 1, 0, -1):
        W, _ = layers[k]
        gW, gb = glayers[k]
        h, s, A, T = hs[k], ss[k - 1], As[k - 1], Ts[k - 1]
        gW += ga.T @ h + np.einsum("boj,bij->oi", gA, T)
        gb += ga.sum(axis=0)
        gh = ga @ W
        gT = np.einsum("oi,boj->bij", W, gA)
        gs = np.sum(gT * A, axis=2)
        gA = s[:, :, None] * gT
        ga = (gh - 2.0 * h * gs) * s
    W, _ = layers[0]
    gW, gb = glayers[0]
    gW += ga.T @ hs[0]
    gW[:, 1:] += np.einsum("boj,bij->oi", gA, G)
    gb += ga.sum(axis=0)
    gu = ga @ W
    gG = np.einsum("oi,boj->bij", W[:, 1:], gA)
    gQ += gu[:, 1:] - np.einsum("bij,bj->bi", gG + gG.transpose(0, 2, 1), Q)
    return X, D, gQ, gu[:, 0], gtheta
