"""Time-conditioned coefficient network f(t, q): R x R^m -> R^m.

A tanh MLP whose input is ``[t, q]``. Parameters live in one flat float64
vector (row-major weight then bias, layer by layer) so kernels, optimizers
and checkpoints can all share the same buffer. Parameter gradients use the
same flat layout.

The single-point ``forward``/``jvp``/``vjp`` here are deliberately written
layer by layer and stay independent of the fused kernels in
:mod:`sphereflow.kernels`; tests use each to check the other.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def _check_sizes(layer_sizes):
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes) or any(s != t for s, t in zip(sizes, layer_sizes)):
        raise ConfigError(f"layer sizes must be >= 2 positive integers, got {list(layer_sizes)!r}")
    if sizes[0] != sizes[-1] + 1:
        raise ConfigError(
            f"input width must be output width + 1 (time + coordinates), got {sizes[0]} -> {sizes[-1]}"
        )
    return sizes


def param_count(layer_sizes):
    return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def layer_offsets(layer_sizes):
    """Start offsets of every weight matrix and bias vector inside the flat buffer."""
    w_off, b_off = [], []
    pos = 0
    for i, o in zip(layer_sizes[:-1], layer_sizes[1:]):
        w_off.append(pos)
        pos += o * i
        b_off.append(pos)
        pos += o
    return np.array(w_off, dtype=np.int64), np.array(b_off, dtype=np.int64)


@dataclass
class CoefficientNet:
    layer_sizes: tuple
    theta: np.ndarray

    def __post_init__(self):
        self.layer_sizes = _check_sizes(self.layer_sizes)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.layer_sizes),):
            raise ConfigError(
                f"parameter vector has shape {self.theta.shape}, layout needs "
                f"({param_count(self.layer_sizes)},)"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite network parameters")

    @property
    def dim(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return self.theta.shape[0]

    def layers(self, theta=None):
        """(W, b) views into ``theta`` (defaults to the net's own parameters)."""
        theta = self.theta if theta is None else theta
        out = []
        for w0, b0, i, o in zip(*layer_offsets(self.layer_sizes), self.layer_sizes[:-1], self.layer_sizes[1:]):
            out.append((theta[w0:w0 + o * i].reshape(o, i), theta[b0:b0 + o]))
        return out

    def copy(self, theta=None):
        return CoefficientNet(self.layer_sizes, self.theta.copy() if theta is None else theta)

    def with_params(self, theta):
        return CoefficientNet(self.layer_sizes, theta)

    def zeros_like(self):
        return np.zeros_like(self.theta)


def init_params(layer_sizes, seed=0):
    """Fan-in scaled uniform init; the output layer starts at zero (identity flow)."""
    sizes = _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    net = CoefficientNet(sizes, np.zeros(param_count(sizes)))
    for k, (W, b) in enumerate(net.layers()):
        if k == len(sizes) - 2:
            continue
        bound = 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return net


def default_layer_sizes(n, hidden=(10, 10)):
    return (n + 2, *hidden, n + 1)


def _inputs(t, q):
    q = np.asarray(q, dtype=float)
    u = np.concatenate(([float(t)], q))
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite network input")
    return u


def _activations(net, u):
    hs = [u]
    layers = net.layers()
    for W, b in layers[:-1]:
        hs.append(np.tanh(W @ hs[-1] + b))
    W, b = layers[-1]
    return hs, W @ hs[-1] + b


def forward(net, t, q):
    _, f = _activations(net, _inputs(t, q))
    return f


def jvp(net, t, q, dq):
    """(df/dq) dq by forward propagation of a tangent alongside the activations."""
    u = _inputs(t, q)
    du = np.concatenate(([0.0], np.asarray(dq, dtype=float)))
    h, dh = u, du
    layers = net.layers()
    for W, b in layers[:-1]:
        h = np.tanh(W @ h + b)
        dh = (1.0 - h * h) * (W @ dh)
    W, _ = layers[-1]
    return W @ dh


def vjp(net, t, q, ct):
    """Pull ``ct`` back through f.

    Returns ``(grad_q, grad_t, grad_theta)`` with grad_q = (df/dq)^T ct,
    grad_t = (df/dt)^T ct and grad_theta = d(ct . f)/d theta in the flat layout.
    """
    hs, _ = _activations(net, _inputs(t, q))
    grad = np.zeros_like(net.theta)
    glayers = net.layers(grad)
    layers = net.layers()
    g = np.asarray(ct, dtype=float)
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        gW, gb = glayers[k]
        gW += np.outer(g, hs[k])
        gb += g
        g = W.T @ g
        if k > 0:
            g = g * (1.0 - hs[k] ** 2)
    return g[1:], g[0], grad


def random_net(layer_sizes, seed=0, scale=1.0):
    """All parameters uniform in [-scale, scale]; used by diagnostics and tests."""
    sizes = _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    return CoefficientNet(sizes, rng.uniform(-scale, scale, size=param_count(sizes)))


def linear_net(Wq, time_col=None, bias=None):
    """Single affine layer f(t, q) = Wq q + time_col t + bias (no hidden layers)."""
    Wq = np.asarray(Wq, dtype=float)
    m = Wq.shape[0]
    W = np.zeros((m, m + 1))
    W[:, 1:] = Wq
    if time_col is not None:
        W[:, 0] = time_col
    b = np.zeros(m) if bias is None else np.asarray(bias, dtype=float)
    return CoefficientNet((m + 1, m), np.concatenate([W.ravel(), b]))


def rotation_generator(m, i, j, angle):
    """Skew matrix whose exponential rotates the (e_i, e_j) plane by ``angle``."""
    A = np.zeros((m, m))
    A[j, i] = angle
    A[i, j] = -angle
    return A
