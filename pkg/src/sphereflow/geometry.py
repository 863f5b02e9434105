"""Geometry of the unit hypersphere S^n embedded in R^(n+1).

Points and tangent vectors are plain float arrays in ambient coordinates;
every function broadcasts over leading batch axes.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, StepTooLargeError

NORM_TOL = 1e-9


@dataclass(frozen=True)
class Sphere:
    """S^n with intrinsic dimension ``n`` and ambient dimension ``n + 1``."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"sphere dimension must be an integer >= 1, got {self.n!r}")

    @property
    def dim(self):
        return self.n + 1

    @classmethod
    def from_ambient(cls, dim):
        return cls(int(dim) - 1)

    def log_uniform_density(self):
        return log_uniform_density(self.n)

    def sample_uniform(self, rng, count):
        return sample_uniform(rng, count, self.n)


def check_point(q, tol=NORM_TOL):
    q = np.asarray(q, dtype=float)
    err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if not np.all(err <= tol):
        raise ValueError(f"point off the unit sphere (max |norm - 1| = {err.max():.3e})")
    return q


def project_tangent(q, v):
    """Remove the normal component of ``v`` at ``q``: v - <q, v> q."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.sum(q * v, axis=-1, keepdims=True) * q


def retract(q, step):
    """Map ``q + step`` back onto the sphere by normalization."""
    y = np.asarray(q, dtype=float) + np.asarray(step, dtype=float)
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(r == 0.0):
        raise StepTooLargeError("retraction step cancels the base point (q + step = 0)")
    return y / r


def generator_fields(q):
    """Projected coordinate fields e_i - q_i q, returned as rows of a (..., m, m) array."""
    q = np.asarray(q, dtype=float)
    m = q.shape[-1]
    return np.eye(m) - q[..., :, None] * q[..., None, :]


def generator_divergences(q):
    """Divergences of the projected coordinate fields: -n q_i."""
    q = np.asarray(q, dtype=float)
    return -(q.shape[-1] - 1) * q


def sample_uniform(rng, count, n):
    """``count`` uniform points on S^n drawn as normalized Gaussian vectors."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    x = rng.standard_normal((count, n + 1))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def log_uniform_density(n):
    """-log of the surface area 2 pi^((n+1)/2) / Gamma((n+1)/2) of S^n."""
    h = 0.5 * (n + 1)
    return -(np.log(2.0) + h * np.log(np.pi) - gammaln(h))


def geodesic_distance(a, b):
    # chord form keeps precision for nearby points, unlike arccos of the dot product
    chord = np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)
    return 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))


# -- hyperspherical chart, used as an independent divergence oracle ----------

def chart_angles(q):
    """Hyperspherical angles (phi_0, ..., phi_{n-1}) of a single point ``q``."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0] - 1
    phi = np.empty(n)
    for k in range(n - 1):
        phi[k] = np.arctan2(np.linalg.norm(q[k + 1:]), q[k])
    phi[n - 1] = np.arctan2(q[n], q[n - 1]) % (2.0 * np.pi)
    return phi


def chart_point(phi):
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    x = np.empty(n + 1)
    s = 1.0
    for k in range(n):
        x[k] = s * np.cos(phi[k])
        s *= np.sin(phi[k])
    x[n] = s
    return x


def chart_basis(phi):
    """Coordinate vectors d x / d phi_j as rows of an (n, n+1) array."""
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    sin, cos = np.sin(phi), np.cos(phi)
    basis = np.zeros((n, n + 1))
    for j in range(n):
        for k in range(j, n + 1):
            prod = 1.0
            for i in range(min(k, n)):
                prod *= cos[i] if i == j else sin[i]
            if k == j:
                basis[j, k] = -np.prod(sin[:j]) * sin[j]
            elif k < n:
                basis[j, k] = prod * cos[k]
            else:
                basis[j, k] = prod
    return basis


def chart_sqrt_det(phi):
    n = phi.shape[0]
    return np.prod([np.sin(phi[i]) ** (n - 1 - i) for i in range(n - 1)])


def in_chart_interior(q, margin=0.1):
    """True if ``q`` is at least ``margin`` radians from every polar singularity."""
    phi = chart_angles(q)
    polar = phi[:-1]
    return bool(np.all((polar > margin) & (polar < np.pi - margin)))


def chart_divergence(field, q, eps=1e-4, margin=0.1):
    """Riemannian divergence of an ambient tangent field by central differences.

    Evaluates (1/sqrt g) sum_j d_j(sqrt g X^j) in hyperspherical coordinates.
    ``field`` maps one ambient point to one ambient tangent vector.
    """
    q = check_point(q)
    if not in_chart_interior(q, margin):
        raise ValueError("point lies inside an excluded polar cap of the chart")
    phi0 = chart_angles(q)

    def flux(phi, j):
        x = chart_point(phi)
        e = chart_basis(phi)[j]
        return chart_sqrt_det(phi) * np.dot(field(x), e) / np.dot(e, e)

    total = 0.0
    for j in range(phi0.shape[0]):
        dphi = np.zeros_like(phi0)
        dphi[j] = eps
        total += (flux(phi0 + dphi, j) - flux(phi0 - dphi, j)) / (2.0 * eps)
    return total / chart_sqrt_det(phi0)
