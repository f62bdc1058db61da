"""
Analytic Oracle Module
Closed-form OT flow-matching velocity fields for isotropic Gaussian mixtures

With the path x_t = (1-t) z + t x1, z ~ N(0, I) and x1 ~ N(mu_k, s_k^2 I), the
pair (x_t, x1 - z) is jointly Gaussian, so E[x1 - z | x_t = x, k] is affine
in x:

    u_t(x | k) = mu_k + ((t s_k^2 - (1-t)) / v_t) (x - t mu_k),
    v_t = (1-t)^2 + t^2 s_k^2.

The marginal field weights the component fields by the posterior
responsibility of each component given x_t = x.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

ArrayOrInt = Union[int, np.ndarray]


@dataclass(frozen=True, eq=False)
class GaussianMixtureSpec:
    """
    Isotropic Gaussian mixture; label k maps to component k

    Attributes:
        weights: (K,) positive, summing to 1
        means: (K, D)
        variances: (K,) positive
    """
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), w.shape).copy()
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        if w.ndim != 1 or m.shape[0] != w.shape[0]:
            raise ValueError(f"weights {w.shape} and means {m.shape} disagree on K")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        if np.any(v <= 0):
            raise ValueError(f"variances must be positive, got {v}")

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def ring(cls, num_components: int, dim: int = 2, radius: float = 4.0, variance: float = 0.09,
             weights: Optional[Sequence[float]] = None) -> "GaussianMixtureSpec":
        """Means evenly spaced on a circle in the first two coordinates"""
        angles = 2.0 * np.pi * np.arange(num_components) / num_components
        means = np.zeros((num_components, dim))
        means[:, 0] = radius * np.cos(angles)
        if dim > 1:
            means[:, 1] = radius * np.sin(angles)
        if weights is None:
            weights = np.full(num_components, 1.0 / num_components)
        return cls(np.asarray(weights, dtype=np.float64), means, np.full(num_components, variance))


def _check_t(t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return float(t)


def _cond_velocity(mu: np.ndarray, var: np.ndarray, x: np.ndarray, t: float) -> np.ndarray:
    v_t = (1.0 - t) ** 2 + t * t * var
    coef = (t * var - (1.0 - t)) / v_t
    return mu + coef[..., None] * (x - t * mu)


def analytic_cond_velocity(spec: GaussianMixtureSpec, k: ArrayOrInt, x: np.ndarray, t: float) -> np.ndarray:
    """
    Conditional velocity E[x1 - z | x_t = x, component k]

    Args:
        k: component index, or an (n,) array of indices matching rows of x
        x: (D,) or (n, D)
        t: time in [0, 1]; t = 1 returns the limit value x
    """
    t = _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= spec.num_components):
        raise ValueError(f"component index {k} outside [0, {spec.num_components})")
    return _cond_velocity(spec.means[k], spec.variances[k], x, t)


def responsibilities(spec: GaussianMixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    """Posterior component probabilities given x_t = x, shape (n, K) (or (K,) for one point)"""
    t = _check_t(t)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    v_t = (1.0 - t) ** 2 + t * t * spec.variances
    diff = xs[:, None, :] - t * spec.means[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    log_p = np.log(spec.weights) - 0.5 * spec.dim * np.log(2.0 * np.pi * v_t) - 0.5 * sq / v_t
    log_r = log_p - logsumexp(log_p, axis=1, keepdims=True)
    r = np.exp(log_r)
    return r[0] if single else r


def analytic_marginal_velocity(spec: GaussianMixtureSpec, x: np.ndarray, t: float) -> np.ndarray:
    """Marginal velocity sum_k r_k(x, t) u_t(x | k)"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    r = np.atleast_2d(responsibilities(spec, xs, t))
    per_component = _cond_velocity(spec.means[None, :, :], spec.variances[None, :], xs[:, None, :], t)
    out = np.einsum("nk,nkd->nd", r, per_component)
    return out[0] if single else out


def exact_sample(spec: GaussianMixtureSpec, label: ArrayOrInt, rng: np.random.Generator) -> np.ndarray:
    """
    Draw from N(mu_label, s_label^2 I); an array of labels draws one row per label
    """
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= spec.num_components):
        raise ValueError(f"label {label} outside [0, {spec.num_components})")
    noise = rng.standard_normal(label.shape + (spec.dim,))
    return spec.means[label] + np.sqrt(spec.variances[label])[..., None] * noise


def bayes_classify(spec: GaussianMixtureSpec, x: np.ndarray) -> np.ndarray:
    """argmax_k pi_k N(x; mu_k, s_k^2 I); ties go to the smallest k"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    diff = xs[:, None, :] - spec.means[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    log_p = (np.log(spec.weights) - 0.5 * spec.dim * np.log(2.0 * np.pi * spec.variances)
             - 0.5 * sq / spec.variances)
    labels = np.argmax(log_p, axis=1)
    return int(labels[0]) if single else labels
