"""Jit-compiled kernels.

Same contract as :mod:`sphereflow.kernels._numpy`. The batch is cut into
fixed-size chunks processed by ``prange``; inside a chunk every array is
stored feature-major with the sample index innermost, so the per-layer
loops are contiguous axpys over samples.

Parameter gradients are accumulated per chunk and summed in chunk order
afterwards: the reduction never depends on thread scheduling.
"""
import math

import numpy as np
from numba import njit, prange

from ..net import layer_offsets

CHUNK = 32
# reassociation lets the per-chunk reductions vectorize; nan/inf semantics are kept
_FM = {"reassoc", "contract", "nsz", "arcp"}


def _layout(sizes):
    sizes = np.asarray(sizes, dtype=np.int64)
    w_off, b_off = layer_offsets(tuple(int(s) for s in sizes))
    node_off = np.zeros(len(sizes) + 1, dtype=np.int64)
    node_off[1:] = np.cumsum(sizes)
    return sizes, w_off, b_off, node_off


@njit(cache=True, inline="always")
def _tanh(x):
    # libm tanh is several times slower than expm1 here
    e = math.expm1(-2.0 * abs(x))
    y = -e / (2.0 + e)
    return y if x >= 0.0 else -y


@njit(cache=True, fastmath=_FM)
def _forward_chunk(theta, sizes, w_off, b_off, node_off, t, Q, b0, nb, H, S, A, T):
    """Forward pass of samples ``b0 .. b0+nb`` with tangents along the m generators.

    H[k, b]: activations (input ``[t, q]`` first, network output last);
    S: tanh slopes; A[j, k, b]: pre-activation tangents along generator j;
    T = S * A. For the output layer A holds (J_f g_j)_o.
    """
    m = Q.shape[1]
    L = sizes.shape[0] - 1
    for b in range(nb):
        H[0, b] = t
    for i in range(m):
        for b in range(nb):
            H[1 + i, b] = Q[b0 + b, i]
    wq = np.empty(nb)
    for l in range(L):
        nin = sizes[l]
        nout = sizes[l + 1]
        hin = node_off[l]
        hout = node_off[l + 1]
        last = l == L - 1
        for o in range(nout):
            row = w_off[l] + o * nin
            k = hout + o
            bias = theta[b_off[l] + o]
            for b in range(nb):
                H[k, b] = bias
            for i in range(nin):
                w = theta[row + i]
                for b in range(nb):
                    H[k, b] += w * H[hin + i, b]
            if l == 0:
                # W_q (I - q q^T) = W_q - (W_q q) q^T
                for b in range(nb):
                    wq[b] = 0.0
                for i in range(m):
                    w = theta[row + 1 + i]
                    for b in range(nb):
                        wq[b] += w * H[1 + i, b]
                for j in range(m):
                    w = theta[row + 1 + j]
                    for b in range(nb):
                        A[j, k, b] = w - wq[b] * H[1 + j, b]
            else:
                for j in range(m):
                    for b in range(nb):
                        A[j, k, b] = 0.0
                    for i in range(nin):
                        w = theta[row + i]
                        for b in range(nb):
                            A[j, k, b] += w * T[j, hin + i, b]
            if not last:
                for b in range(nb):
                    hv = _tanh(H[k, b])
                    H[k, b] = hv
                    S[k, b] = 1.0 - hv * hv
                for j in range(m):
                    for b in range(nb):
                        T[j, k, b] = S[k, b] * A[j, k, b]


@njit(cache=True)
def _chunk_buffers(m, nodes):
    return (
        np.empty((nodes, CHUNK)),
        np.empty((nodes, CHUNK)),
        np.empty((m, nodes, CHUNK)),
        np.empty((m, nodes, CHUNK)),
    )


@njit(parallel=True, cache=True, fastmath=_FM)
def _field_div(theta, sizes, w_off, b_off, node_off, t, Q):
    B, m = Q.shape
    n = m - 1
    out = node_off[sizes.shape[0] - 1]
    X = np.empty((B, m))
    D = np.empty(B)
    nchunks = (B + CHUNK - 1) // CHUNK
    for c in prange(nchunks):
        b0 = c * CHUNK
        nb = min(CHUNK, B - b0)
        H, S, A, T = _chunk_buffers(m, node_off[-1])
        _forward_chunk(theta, sizes, w_off, b_off, node_off, t, Q, b0, nb, H, S, A, T)
        for b in range(nb):
            cf = 0.0
            tr = 0.0
            for i in range(m):
                cf += H[out + i, b] * H[1 + i, b]
                tr += A[i, out + i, b]
            for i in range(m):
                X[b0 + b, i] = H[out + i, b] - cf * H[1 + i, b]
            D[b0 + b] = tr - n * cf
    return X, D


@njit(parallel=True, cache=True, fastmath=_FM)
def _field_div_vjp(theta, sizes, w_off, b_off, node_off, t, Q, gX, gD):
    B, m = Q.shape
    n = m - 1
    L = sizes.shape[0] - 1
    nodes = node_off[-1]
    out = node_off[L]
    X = np.empty((B, m))
    D = np.empty(B)
    gQ = np.empty((B, m))
    gT_out = np.empty(B)
    nchunks = (B + CHUNK - 1) // CHUNK
    gtheta = np.zeros((nchunks, theta.shape[0]))
    for c in prange(nchunks):
        b0 = c * CHUNK
        nb = min(CHUNK, B - b0)
        H, S, A, T = _chunk_buffers(m, nodes)
        _forward_chunk(theta, sizes, w_off, b_off, node_off, t, Q, b0, nb, H, S, A, T)
        # GA[k, b]: grads of pre-activation values, GT[j, k, b]: of pre-activation tangents
        GA = np.empty((nodes, CHUNK))
        GT = np.empty((m, nodes, CHUNK))
        tmp = np.empty(CHUNK)
        gth = gtheta[c]
        for b in range(nb):
            cf = 0.0
            tr = 0.0
            gxq = 0.0
            for i in range(m):
                cf += H[out + i, b] * H[1 + i, b]
                tr += A[i, out + i, b]
                gxq += gX[b0 + b, i] * H[1 + i, b]
            for i in range(m):
                X[b0 + b, i] = H[out + i, b] - cf * H[1 + i, b]
            D[b0 + b] = tr - n * cf
            gd = gD[b0 + b]
            gc = -gxq - n * gd
            for o in range(m):
                GA[out + o, b] = gX[b0 + b, o] + gc * H[1 + o, b]
                gQ[b0 + b, o] = -cf * gX[b0 + b, o] + gc * H[out + o, b]
                for j in range(m):
                    GT[j, out + o, b] = gd if j == o else 0.0
        for l in range(L - 1, -1, -1):
            nin = sizes[l]
            nout = sizes[l + 1]
            hin = node_off[l]
            oo = node_off[l + 1]
            for o in range(nout):
                row = w_off[l] + o * nin
                k = oo + o
                acc = 0.0
                for b in range(nb):
                    acc += GA[k, b]
                gth[b_off[l] + o] += acc
                for i in range(nin):
                    acc = 0.0
                    for b in range(nb):
                        acc += GA[k, b] * H[hin + i, b]
                    if l > 0:
                        for j in range(m):
                            for b in range(nb):
                                acc += GT[j, k, b] * T[j, hin + i, b]
                    gth[row + i] += acc
            if l > 0:
                for i in range(nin):
                    ki = hin + i
                    for b in range(nb):
                        GA[ki, b] = 0.0
                    for o in range(nout):
                        w = theta[w_off[l] + o * nin + i]
                        for b in range(nb):
                            GA[ki, b] += w * GA[oo + o, b]
                    for b in range(nb):
                        tmp[b] = 0.0
                    for j in range(m):
                        for b in range(nb):
                            GT[j, ki, b] = 0.0
                        for o in range(nout):
                            w = theta[w_off[l] + o * nin + i]
                            for b in range(nb):
                                GT[j, ki, b] += w * GT[j, oo + o, b]
                        for b in range(nb):
                            tmp[b] += GT[j, ki, b] * A[j, ki, b]
                            GT[j, ki, b] *= S[ki, b]
                    for b in range(nb):
                        GA[ki, b] = (GA[ki, b] - 2.0 * H[ki, b] * tmp[b]) * S[ki, b]
            else:
                # first layer: tangents are W_q (I - q q^T)
                for b in range(nb):
                    gT_out[b0 + b] = 0.0
                for o in range(nout):
                    row = w_off[0] + o * nin
                    k = oo + o
                    w0 = theta[row]
                    for b in range(nb):
                        gT_out[b0 + b] += w0 * GA[k, b]
                    for b in range(nb):
                        wq = 0.0
                        r = 0.0
                        for i in range(m):
                            wq += theta[row + 1 + i] * H[1 + i, b]
                            r += GT[i, k, b] * H[1 + i, b]
                        go = GA[k, b]
                        for i in range(m):
                            g = GT[i, k, b]
                            gth[row + 1 + i] += g - H[1 + i, b] * r
                            gQ[b0 + b, i] += theta[row + 1 + i] * (go - r) - g * wq
    return X, D, gQ, gT_out, gtheta


_LAYOUTS = {}


def _get_layout(sizes):
    key = tuple(int(s) for s in sizes)
    lay = _LAYOUTS.get(key)
    if lay is None:
        lay = _LAYOUTS[key] = _layout(key)
    return lay


def field_div(sizes, theta, t, Q):
    return _field_div(theta, *_get_layout(sizes), float(t), np.ascontiguousarray(Q, dtype=np.float64))


def field_div_vjp(sizes, theta, t, Q, gX, gD):
    X, D, gQ, gT, gtheta = _field_div_vjp(
        theta,
        *_get_layout(sizes),
        float(t),
        np.ascontiguousarray(Q, dtype=np.float64),
        np.ascontiguousarray(gX, dtype=np.float64),
        np.ascontiguousarray(gD, dtype=np.float64),
    )
    return X, D, gQ, gT, gtheta.sum(axis=0)
