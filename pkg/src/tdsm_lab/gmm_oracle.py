"""Closed-form ground truth for an isotropic Gaussian mixture under VE diffusion.

Under sigma(t) = t each class density at time t is N(mu_y, (v_y + t^2) I),
so scores, posteriors and transition-aware weights are all available in
closed form.  Everything is evaluated in log space; the toy mixture's
components sit 6*sqrt(2) apart and underflow in linear space at small t.

Shapes: ``x`` is ``(..., d)``; ``t`` and label arguments broadcast against
``x.shape[:-1]``.  Labels are 0-based.  ``S`` is a reverse matrix (either a
``TransitionMatrix`` or a plain array).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .label_noise import REVERSE, TransitionMatrix, forward_from_reverse


# Analytic identities this module provides; each must have a checker
# registered in ``identities`` (a completeness test enforces it).
IDENTITIES = (
    "noisy_score_convex_combination",
    "weight_equals_posterior",
    "weights_on_simplex",
    "weight_estimator_exact",
    "noisy_classifier_bayes",
    "sdsm_fixed_point_consistency",
    "marginal_score_mixture",
    "score_finite_difference",
    "noisy_log_prob_grad_forms",
)


class NumericUnderflow(FloatingPointError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    means: np.ndarray
    variances: np.ndarray
    clean_prior: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.array(self.means, dtype=np.float64))
        var = np.array(self.variances, dtype=np.float64).reshape(-1)
        prior = np.array(self.clean_prior, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        if var.shape != (means.shape[0],) or np.any(var <= 0):
            raise ValueError("need one strictly positive variance per class")
        if prior.shape != var.shape or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ValueError("clean_prior must be a probability vector over the classes")
        for a in (means, var, prior):
            a.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "clean_prior", prior)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def classes(self) -> int:
        return self.means.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(self.classes, size=n, p=self.clean_prior)
        x = self.means[y] + np.sqrt(self.variances[y])[:, None] * rng.standard_normal((n, self.dim))
        return x, y


def toy_mixture() -> GaussianMixture:
    """Two unit-variance classes at (3, 3) and (-3, -3), equal priors."""
    return GaussianMixture(np.array([[3.0, 3.0], [-3.0, -3.0]]), np.ones(2), np.full(2, 0.5))


TOY_REVERSE = np.array([[0.8, 0.2], [0.2, 0.8]])


@dataclass(frozen=True)
class VESchedule:
    """Variance-exploding schedule: zero drift, sigma(t) = t, g(t) = sqrt(2t)."""

    t_min: float = 0.05
    t_max: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.t_min < self.t_max:
            raise ValueError("need 0 <= t_min < t_max")

    @staticmethod
    def sigma(t):
        return np.asarray(t, dtype=np.float64)

    @staticmethod
    def g(t):
        return np.sqrt(2.0 * np.asarray(t, dtype=np.float64))

    @staticmethod
    def drift(x, t):
        return np.zeros_like(np.asarray(x, dtype=np.float64))


def _reverse_entries(S) -> np.ndarray:
    if isinstance(S, TransitionMatrix):
        if S.orientation != REVERSE:
            raise ValueError("expected a reverse transition matrix S")
        return S.entries
    s = np.asarray(S, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or np.max(np.abs(s.sum(axis=1) - 1)) > 1e-10:
        raise ValueError("S must be a square row-stochastic matrix")
    return s


def _prep(gmm: GaussianMixture, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.dim:
        raise ValueError(f"x has trailing dimension {x.shape[-1]}, mixture has d = {gmm.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    return x, t


def _label(gmm: GaussianMixture, y, shape) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError("class index must be an integer")
    if np.any(y < 0) or np.any(y >= gmm.classes):
        raise IndexError(f"class index out of range [0, {gmm.classes})")
    return np.broadcast_to(y, shape)


def _pick(a: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # a[..., idx] elementwise over leading axes
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def class_variances(gmm: GaussianMixture, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return gmm.variances + (t ** 2)[..., None]


def log_class_densities(gmm: GaussianMixture, sched: VESchedule, x, t) -> np.ndarray:
    """log N(x; mu_y, (v_y + t^2) I) for every class, shape (..., c)."""
    x, t = _prep(gmm, x, t)
    v = class_variances(gmm, t)
    sq = ((x[..., None, :] - gmm.means) ** 2).sum(axis=-1)
    return -0.5 * sq / v - 0.5 * gmm.dim * np.log(2.0 * np.pi * v)


def perturbed_class_density(gmm, sched, x, y, t) -> np.ndarray:
    lp = log_class_densities(gmm, sched, x, t)
    return np.exp(_pick(lp, _label(gmm, y, lp.shape[:-1])))


def clean_scores(gmm: GaussianMixture, sched: VESchedule, x, t) -> np.ndarray:
    """Scores of every clean class, shape (..., c, d)."""
    x, t = _prep(gmm, x, t)
    v = class_variances(gmm, t)
    return -(x[..., None, :] - gmm.means) / v[..., None]


def clean_score(gmm, sched, x, y, t) -> np.ndarray:
    cs = clean_scores(gmm, sched, x, t)
    y = _label(gmm, y, cs.shape[:-2])
    return np.take_along_axis(cs, y[..., None, None], axis=-2)[..., 0, :]


def _log_s(S) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(_reverse_entries(S))


def weight_vectors(gmm, sched, S, x, noisy_label, t) -> np.ndarray:
    """w(x, noisy, ., t) over clean classes, shape (..., c)."""
    lp = log_class_densities(gmm, sched, x, t)
    yt = _label(gmm, noisy_label, lp.shape[:-1])
    a = _log_s(S)[yt] + lp
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    return np.exp(a - norm)


def weight_matrices(gmm, sched, S, x, t) -> np.ndarray:
    """W(x)[noisy, clean] = w(x, noisy, clean, t), shape (..., c, c)."""
    lp = log_class_densities(gmm, sched, x, t)
    a = _log_s(S) + lp[..., None, :]
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    return np.exp(a - norm)


def exact_weight(gmm, sched, S, x, noisy_label, y, t) -> np.ndarray:
    """S[noisy, y] p_t(x | y) / p_t(x | noisy)."""
    w = weight_vectors(gmm, sched, S, x, noisy_label, t)
    return _pick(w, _label(gmm, y, w.shape[:-1]))


def noisy_score(gmm, sched, S, x, noisy_label, t) -> np.ndarray:
    """Gradient of log sum_y S[noisy, y] p_t(x | y).

    Computed directly from the mixture's log density gradient (responsibility
    weighted Gaussian scores), which is the same algebra as the weighted sum
    but evaluated without going through ``exact_weight``.
    """
    x, t = _prep(gmm, x, t)
    v = class_variances(gmm, t)
    sq = ((x[..., None, :] - gmm.means) ** 2).sum(axis=-1)
    logdens = -0.5 * sq / v - 0.5 * gmm.dim * np.log(2.0 * np.pi * v)
    yt = _label(gmm, noisy_label, logdens.shape[:-1])
    a = _log_s(S)[yt] + logdens
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    resp = np.exp(a - norm)
    # grad log N = -(x - mu)/v
    return -(resp[..., None] / v[..., None] * (x[..., None, :] - gmm.means)).sum(axis=-2)


def log_marginal(gmm, sched, x, t) -> np.ndarray:
    return logsumexp(np.log(gmm.clean_prior) + log_class_densities(gmm, sched, x, t), axis=-1)


def marginal_score(gmm, sched, x, t) -> np.ndarray:
    """Unconditional score of the clean-prior mixture."""
    post = clean_posterior(gmm, sched, x, t)
    return (post[..., None] * clean_scores(gmm, sched, x, t)).sum(axis=-2)


def clean_posterior(gmm, sched, x, t) -> np.ndarray:
    """p_t(Y = . | x), shape (..., c)."""
    with np.errstate(divide="ignore"):
        a = np.log(gmm.clean_prior) + log_class_densities(gmm, sched, x, t)
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    return np.exp(a - norm)


def noisy_prior(gmm: GaussianMixture, S) -> np.ndarray:
    """p(noisy) consistent with S and the clean prior."""
    _, p = forward_from_reverse(TransitionMatrix(_reverse_entries(S), REVERSE), clean_prior=gmm.clean_prior)
    return p


def forward_matrix(gmm: GaussianMixture, S) -> np.ndarray:
    T, _ = forward_from_reverse(TransitionMatrix(_reverse_entries(S), REVERSE), clean_prior=gmm.clean_prior)
    return T.entries


def posterior_weight(gmm, sched, S, x, noisy_label, y, t) -> np.ndarray:
    """p_t(Y = y | noisy, x) = T[y, noisy] p_t(y | x) / p_t(noisy | x)."""
    T = forward_matrix(gmm, S)
    with np.errstate(divide="ignore"):
        a = np.log(gmm.clean_prior) + log_class_densities(gmm, sched, x, t) + np.log(T.T)[
            _label(gmm, noisy_label, np.shape(x)[:-1])]
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    w = np.exp(a - norm)
    return _pick(w, _label(gmm, y, w.shape[:-1]))


def oracle_noisy_classifier(gmm, sched, S, x, t) -> np.ndarray:
    """p_t(noisy = i | x) = sum_j T[j, i] p_t(Y = j | x)."""
    T = forward_matrix(gmm, S)
    return clean_posterior(gmm, sched, x, t) @ T


def posterior_weight_matrices(gmm, sched, S, x, t) -> np.ndarray:
    """P[noisy, y] = p_t(Y = y | noisy, x) from the forward matrix and the clean posterior."""
    T = forward_matrix(gmm, S)
    with np.errstate(divide="ignore"):
        a = (np.log(gmm.clean_prior) + log_class_densities(gmm, sched, x, t))[..., None, :] + np.log(T.T)
    norm = logsumexp(a, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise NumericUnderflow("all mixture components underflowed")
    return np.exp(a - norm)


def oracle_clean_log_prob_grads(gmm, sched, x, t) -> np.ndarray:
    """grad_x log p_t(Y = y | x) for every y, shape (..., c, d).

    Written as sum_j p_t(j | x) (s_y - s_j) so that nearly-certain classes
    keep their tiny gradients instead of losing them to cancellation.
    """
    s = clean_scores(gmm, sched, x, t)
    post = clean_posterior(gmm, sched, x, t)
    diff = s[..., :, None, :] - s[..., None, :, :]
    return np.einsum("...j,...yjd->...yd", post, diff)


def oracle_noisy_log_prob_grads(gmm, sched, S, x, t) -> np.ndarray:
    """grad_x log p_t(noisy = i | x) for every i, shape (..., c, d).

    p(i | x) = sum_y T[y, i] p(y | x), so its log-gradient is the
    posterior-weighted sum of clean log-posterior gradients.
    """
    P = posterior_weight_matrices(gmm, sched, S, x, t)
    return P @ oracle_clean_log_prob_grads(gmm, sched, x, t)


def sdsm_fixed_point(gmm, sched, S, x, y, t) -> np.ndarray:
    """Row y of inv(S) W(x) [clean scores]: the S-weighted DSM optimum."""
    s = _reverse_entries(S)
    try:
        s_inv = np.linalg.inv(s)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("S is singular; the S-weighted optimum is undefined") from exc
    if not np.all(np.isfinite(s_inv)) or abs(np.linalg.det(s)) < 1e-14:
        raise np.linalg.LinAlgError("S is singular; the S-weighted optimum is undefined")
    W = weight_matrices(gmm, sched, s, x, t)
    fields = s_inv @ W @ clean_scores(gmm, sched, x, t)
    y = _label(gmm, y, fields.shape[:-2])
    return np.take_along_axis(fields, y[..., None, None], axis=-2)[..., 0, :]
