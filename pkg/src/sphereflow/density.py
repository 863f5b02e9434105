"""Target densities, model sampling and the KL / ESS evaluation metrics."""
from dataclasses import dataclass
import math
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError
from .flow import IntegratorConfig, integrate_forward
from .geometry import check_point, log_uniform_density, project_tangent, sample_uniform

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "mu", check_point(self.mu))
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa!r}")


@dataclass(frozen=True)
class VmfMixture:
    weights: np.ndarray
    means: np.ndarray
    kappas: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        k = np.atleast_1d(np.asarray(self.kappas, dtype=float))
        if len(w) == 0 or not (len(w) == len(mu) == len(k)):
            raise ConfigError("mixture needs matching, non-empty weights / means / kappas")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(k <= 0):
            raise ConfigError("mixture kappas must be positive")
        if mu.shape[1] not in (3, 4):
            raise ConfigError(f"only ambient dimensions 3 and 4 are supported, got {mu.shape[1]}")
        try:
            check_point(mu)
        except ValueError as exc:
            raise ConfigError(f"mixture means must be unit vectors: {exc}") from None
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "kappas", k)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def components(self):
        return [VmfComponent(m, k) for m, k in zip(self.means, self.kappas)]

    @classmethod
    def from_unnormalized(cls, weights, means, kappas):
        w = np.asarray(weights, dtype=float)
        mu = np.asarray(means, dtype=float)
        return cls(w / w.sum(), mu / np.linalg.norm(mu, axis=1, keepdims=True), kappas)


def benchmark_mixture(dim):
    """Four equally weighted kappa=10 components: tetrahedron on S^2, axis pairs on S^3."""
    if dim == 3:
        means = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
    elif dim == 4:
        means = [[1, 0, 0, 0], [-1, 0, 0, 0], [0, 1, 0, 0], [0, -1, 0, 0]]
    else:
        raise ConfigError(f"no benchmark mixture for ambient dimension {dim}")
    return VmfMixture.from_unnormalized(np.ones(4), means, np.full(4, 10.0))


# -- vMF normalization ------------------------------------------------------

def log_bessel_i1(x):
    """log I_1(x) for x > 0: power series below 20, asymptotic expansion above."""
    x = float(x)
    if x <= 0:
        raise ValueError("log_bessel_i1 needs x > 0")
    if x < 20.0:
        return math.log(0.5 * x) + math.log(_i1_series_sum(x))
    # I_1(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k / x^k, a_k = prod_{j<=k} (4 - (2j-1)^2) / (k! 8^k)
    total, term = 1.0, 1.0
    for k in range(1, 60):
        term *= -(4.0 - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return x - 0.5 * (LOG_2PI + math.log(x)) + math.log(total)


def _i1_series_sum(x):
    # sum_k (x^2/4)^k / (k! (k+1)!)
    y = 0.25 * x * x
    total, term, k = 1.0, 1.0, 0
    while True:
        k += 1
        term *= y / (k * (k + 1))
        total += term
        if term < 1e-17 * total:
            return total


def log_vmf_normalizer(kappa, dim):
    """log C_d(kappa) such that C_d exp(kappa <mu, x>) integrates to 1 over S^(d-1)."""
    kappa = float(kappa)
    if dim == 3:
        # C_3 = kappa / (4 pi sinh kappa); log(kappa / sinh kappa) stays exact as kappa -> 0
        if kappa < 1.0:
            log_ratio = -math.log(math.sinh(kappa) / kappa) if kappa > 0 else 0.0
        else:
            log_ratio = math.log(kappa) - (kappa + math.log1p(-math.exp(-2.0 * kappa)) - math.log(2.0))
        return log_ratio - math.log(4.0 * math.pi)
    if dim == 4:
        # C_4 = kappa / ((2 pi)^2 I_1(kappa))
        if kappa < 20.0:
            log_ratio = math.log(2.0) - math.log(_i1_series_sum(kappa))
        else:
            log_ratio = math.log(kappa) - log_bessel_i1(kappa)
        return log_ratio - 2.0 * LOG_2PI
    raise ConfigError(f"vMF density only supported for ambient dimension 3 or 4, got {dim}")


def vmf_log_density(comp, x, dim=None):
    x = np.asarray(x, dtype=float)
    dim = x.shape[-1] if dim is None else dim
    if dim != comp.mu.shape[0] or x.shape[-1] != dim:
        raise ConfigError("point, mean and dimension disagree")
    return comp.kappa * (x @ comp.mu) + log_vmf_normalizer(comp.kappa, dim)


def _component_logs(mix, x):
    lognorm = np.array([log_vmf_normalizer(k, mix.dim) for k in mix.kappas])
    return (np.asarray(x, dtype=float) @ mix.means.T) * mix.kappas + lognorm + np.log(mix.weights)


def mixture_log_density(mix, x):
    return logsumexp(_component_logs(mix, x), axis=-1)


def mixture_grad_log_density(mix, x):
    """Ambient gradient sum_k r_k kappa_k mu_k (responsibility weighted)."""
    logs = _component_logs(mix, x)
    resp = np.exp(logs - logsumexp(logs, axis=-1, keepdims=True))
    return (resp * mix.kappas) @ mix.means


def uniform_limit_mixture(dim, kappa=1e-12):
    """A single near-zero-concentration component: numerically the uniform density."""
    mu = np.zeros(dim)
    mu[-1] = 1.0
    return VmfMixture([1.0], [mu], [kappa])


# -- model sampling / density -----------------------------------------------

def sample_model(net, cfg=IntegratorConfig(), count=1, seed=0):
    """Flow uniform base samples forward; returns ``(x, log_q)`` arrays."""
    n = net.dim - 1
    q0 = sample_uniform(np.random.default_rng(seed), count, n)
    res = integrate_forward(net, q0, cfg)
    return res.q1, log_uniform_density(n) + res.delta_log_density


def log_density_at(net, x, cfg=IntegratorConfig()):
    """Model log-density at ``x``: flow back to t0, then undo the accumulated divergence."""
    x = np.asarray(x, dtype=float)
    res = integrate_forward(net, x, cfg.reversed())
    return log_uniform_density(net.dim - 1) - res.delta_log_density


# -- metrics ----------------------------------------------------------------

class KLEstimate(NamedTuple):
    kl: float
    stderr: float


def estimate_kl(x, log_q, target):
    """Monte Carlo reverse KL(model || target) with its standard error."""
    diff = np.asarray(log_q, dtype=float) - mixture_log_density(target, x)
    n = diff.shape[0]
    se = float(np.std(diff, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return KLEstimate(float(np.mean(diff)), se)


def ess_from_log_weights(log_w):
    log_w = np.asarray(log_w, dtype=float)
    if not np.any(np.isfinite(log_w)):
        raise FloatingPointError("all importance weights are zero")
    w = np.exp(log_w - np.max(log_w))
    return float(100.0 * w.sum() ** 2 / (w.shape[0] * np.sum(w * w)))


def estimate_ess(x, log_q, target):
    """Normalized importance-sampling ESS in percent, weights target / model."""
    return ess_from_log_weights(mixture_log_density(target, x) - np.asarray(log_q, dtype=float))


@dataclass
class EvalReport:
    kl_nats: float
    kl_stderr: float
    ess_percent: float
    n_samples: int
    seed: int

    def as_dict(self):
        return {
            "kl_nats": self.kl_nats,
            "kl_stderr": self.kl_stderr,
            "ess_percent": self.ess_percent,
            "n_samples": self.n_samples,
            "seed": self.seed,
        }


def evaluate(net, target, cfg=IntegratorConfig(), n_samples=20000, seed=0):
    x, log_q = sample_model(net, cfg, n_samples, seed)
    kl = estimate_kl(x, log_q, target)
    return EvalReport(kl.kl, kl.stderr, estimate_ess(x, log_q, target), int(n_samples), int(seed))


# -- latitude / longitude grids on S^2 ----------------------------------------

def latlon_grid(n_lat, n_lon):
    """Cell-centred colatitude/longitude grid; returns ``theta, phi, points`` flattened row-major."""
    theta = (np.arange(n_lat) + 0.5) * (math.pi / n_lat)
    phi = (np.arange(n_lon) + 0.5) * (2.0 * math.pi / n_lon)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
    return T.ravel(), P.ravel(), pts.reshape(-1, 3)


def grid_integral(log_density, theta, n_lat, n_lon):
    """Midpoint-rule integral of exp(log_density) with the sin(theta) area element."""
    cell = (math.pi / n_lat) * (2.0 * math.pi / n_lon)
    return float(np.sum(np.exp(log_density) * np.sin(theta)) * cell)


def gauss_sphere_quadrature(n_lat, n_lon):
    """Nodes and weights on S^2: Gauss-Legendre in cos(theta), uniform in phi.

    Spectrally accurate for smooth integrands, unlike the cell-centred grid.
    """
    x, w = np.polynomial.legendre.leggauss(n_lat)
    theta = np.arccos(x)
    phi = (np.arange(n_lon) + 0.5) * (2.0 * math.pi / n_lon)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    weights = np.repeat(w * (2.0 * math.pi / n_lon), n_lon)
    return pts, weights


def tangential_score(mix, x):
    return project_tangent(x, mixture_grad_log_density(mix, x))
