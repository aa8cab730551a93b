"""Reverse-time samplers and guided scores for the VE diffusion.

A score function here has the signature ``score_fn(x, y, t) -> (n, d)``
with ``x`` of shape (n, d), ``y`` an integer array of shape (n,) and ``t`` a
scalar.  Guidance variants are built by wrapping score functions, so the
samplers themselves only know about plain scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from . import gmm_oracle as oracle
from . import nn_core as nn

log = logging.getLogger(__name__)

ScoreFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

COND_LIMIT = 1e12

IDENTITIES = (
    "classifier_guidance_oracle",
    "transition_aware_guidance_oracle",
    "affine_noisy_reconstruction",
)


class SamplerDiverged(FloatingPointError):
    pass


@dataclass
class SamplerConfig:
    method: str = "reverse-sde"
    steps: int = 256
    t_max: float = 10.0
    t_min: float = 0.05
    seed: int = 0
    prior_var: float = 1.0

    def __post_init__(self):
        if self.method not in ("reverse-sde", "ode-heun"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if self.steps < 2:
            raise ValueError("need at least 2 steps")
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")


def time_grid(cfg: SamplerConfig) -> np.ndarray:
    """Geometric spacing from t_max down to t_min (steps + 1 points)."""
    return np.geomspace(cfg.t_max, cfg.t_min, cfg.steps + 1)


def _labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    return np.full(n, int(y)) if y.ndim == 0 else y


def _initial(cfg: SamplerConfig, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    # Exact marginal of unit-variance data at t_max rather than N(0, t_max^2 I).
    return np.sqrt(cfg.prior_var + cfg.t_max ** 2) * rng.standard_normal((n, d))


def _check(x: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplerDiverged(f"non-finite sampler state at t = {t:.4g}")


def sample_reverse_sde(score_fn: ScoreFn, sched, cfg: SamplerConfig, y, n_samples: int,
                       dim: int = 2) -> np.ndarray:
    """Euler-Maruyama on dx = -g^2 score dt + g dw, run from t_max to t_min.

    With sigma(t) = t the integrated g^2 over a step is the drop in t^2,
    which is used directly as the step variance.
    """
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    labels = _labels(y, n_samples)
    x = _initial(cfg, n_samples, dim, rng)
    ts = time_grid(cfg)
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        dvar = t_cur ** 2 - t_next ** 2
        x = x + dvar * score_fn(x, labels, float(t_cur)) + np.sqrt(dvar) * rng.standard_normal(x.shape)
        _check(x, t_next)
    return x


def sample_ode(score_fn: ScoreFn, sched, cfg: SamplerConfig, y, n_samples: int, dim: int = 2,
               x_init: np.ndarray | None = None) -> np.ndarray:
    """Heun integration of the probability-flow ODE dx/dt = -t * score."""
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    labels = _labels(y, n_samples)
    x = _initial(cfg, n_samples, dim, rng) if x_init is None else np.array(x_init, dtype=np.float64)
    ts = time_grid(cfg)
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        h = t_next - t_cur
        d_cur = -t_cur * score_fn(x, labels, float(t_cur))
        x_euler = x + h * d_cur
        d_next = -t_next * score_fn(x_euler, labels, float(t_next))
        x = x + 0.5 * h * (d_cur + d_next)
        _check(x, t_next)
    return x


def sample(score_fn: ScoreFn, sched, cfg: SamplerConfig, y, n_samples: int, dim: int = 2) -> np.ndarray:
    fn = sample_reverse_sde if cfg.method == "reverse-sde" else sample_ode
    return fn(score_fn, sched, cfg, y, n_samples, dim)


# --- score functions ------------------------------------------------------

def model_score_fn(model) -> ScoreFn:
    def fn(x, y, t):
        return model.score(x, y, np.full(x.shape[0], t))
    return fn


def oracle_score_fn(gmm, sched) -> ScoreFn:
    def fn(x, y, t):
        return oracle.clean_score(gmm, sched, x, y, t)
    return fn


def oracle_noisy_score_fn(gmm, sched, S) -> ScoreFn:
    def fn(x, y, t):
        return oracle.noisy_score(gmm, sched, S, x, y, t)
    return fn


def guided_score_cg(uncond_score_fn, classifier_grad_fn, scale: float, x, y, t) -> np.ndarray:
    """uncond(x, t) + scale * grad_x log p_t(y | x)."""
    return uncond_score_fn(x, t) + scale * classifier_grad_fn(x, y, t)


def invert_weight_matrices(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched inverse plus a mask of matrices that are too ill-conditioned.

    Weight matrices factor as diag(a) S diag(b), so at small t their columns
    can differ in scale by 30+ orders of magnitude while the matrix is still
    exactly invertible.  Columns and then rows are equilibrated before
    inverting; the condition test applies to the equilibrated matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    with np.errstate(divide="ignore"):
        col = 1.0 / np.abs(W).max(axis=-2, keepdims=True)
        W1 = W * col
        row = 1.0 / np.abs(W1).max(axis=-1, keepdims=True)
    W2 = W1 * row
    cond = np.linalg.cond(np.where(np.isfinite(W2), W2, 0.0))
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    W_inv = np.zeros_like(W)
    if (~bad).any():
        # inv(W) = diag(col) inv(W2) diag(row)
        W_inv[~bad] = np.swapaxes(col, -1, -2)[~bad] * np.linalg.inv(W2[~bad]) * np.swapaxes(row, -1, -2)[~bad]
    return W_inv, bad


def guided_score_tcg(uncond_score_fn, noisy_log_prob_grad_fn, weight_matrix_fn, x, y, t,
                     scale: float = 1.0) -> np.ndarray:
    """Classifier guidance from a noisy-label classifier.

    Clean-label log-probability gradients are reconstructed as
    ``inv(W)[y, :] @ grad log p_t(noisy = . | x)``, with ``W`` taken as a
    constant.  Points where ``W`` is ill-conditioned fall back to plain
    guidance with the noisy classifier's gradient for label ``y``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _labels(y, x.shape[0])
    G = noisy_log_prob_grad_fn(x, t)                # (n, c, d)
    W = weight_matrix_fn(x, t)                      # (n, noisy, clean)
    W_inv, bad = invert_weight_matrices(W)
    rows = np.arange(x.shape[0])
    clean_grad = np.einsum("nk,nkd->nd", W_inv[rows, y, :], G)
    if bad.any():
        log.warning("ill-conditioned weight matrix at %d points; using plain guidance there", int(bad.sum()))
        clean_grad[bad] = G[rows[bad], y[bad]]
    return uncond_score_fn(x, t) + scale * clean_grad


def guided_score_cfg(model, alpha: float, x, y, t) -> np.ndarray:
    """(1 + alpha) s(x, y, t) - alpha s(x, null, t)."""
    n = x.shape[0]
    tt = np.full(n, t) if np.ndim(t) == 0 else t
    cond = model.score(x, y, tt)
    if alpha == 0:
        return cond
    uncond = model.score(x, np.full(n, model.null_index), tt)
    return (1.0 + alpha) * cond - alpha * uncond


def affine_coefficients(weights: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Per-class coefficients of the affine score; each row sums to 1."""
    coef = -lam * weights
    coef[np.arange(len(y)), y] += 1.0 + lam
    return coef


def affine_score(score_fn: ScoreFn, weight_fn, lam: float, x, y, t, classes: int = 2) -> np.ndarray:
    """(1 + lam) s(x, y) - lam * sum_j w(x, y, j, t) s(x, j).

    The subtracted term is the noisy-label score for label ``y``
    reconstructed from the clean-label model scores.  ``weight_fn`` has the
    training signature ``(x, noisy_labels, t_array) -> (n, c)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = _labels(y, n)
    if lam == 0:
        return score_fn(x, y, t)
    w = weight_fn(x, y, np.full(n, t))
    coef = affine_coefficients(w, y, lam)
    out = np.zeros_like(x)
    for j in range(classes):
        out += coef[:, j:j + 1] * score_fn(x, np.full(n, j), t)
    return out


def weight_matrix_fn(weight_fn, classes: int):
    """Stack weight vectors for every noisy label into W(x), shape (n, c, c)."""
    def fn(x, t):
        n = x.shape[0]
        tt = np.full(n, t)
        return np.stack([weight_fn(x, np.full(n, k), tt) for k in range(classes)], axis=1)
    return fn


def cg_score_fn(uncond_score_fn, classifier_grad_fn, scale: float) -> ScoreFn:
    return partial(_cg_wrapped, uncond_score_fn, classifier_grad_fn, scale)


def _cg_wrapped(uncond, grad, scale, x, y, t):
    return guided_score_cg(uncond, grad, scale, x, y, t)


def tcg_score_fn(uncond_score_fn, noisy_log_prob_grad_fn, weight_mat_fn, scale: float = 1.0) -> ScoreFn:
    def fn(x, y, t):
        return guided_score_tcg(uncond_score_fn, noisy_log_prob_grad_fn, weight_mat_fn, x, y, t, scale)
    return fn


def cfg_score_fn(model, alpha: float) -> ScoreFn:
    def fn(x, y, t):
        return guided_score_cfg(model, alpha, x, y, t)
    return fn


def affine_score_fn(score_fn: ScoreFn, weight_fn, lam: float, classes: int = 2) -> ScoreFn:
    def fn(x, y, t):
        return affine_score(score_fn, weight_fn, lam, x, y, t, classes)
    return fn


def classifier_log_prob_grads(classifier, x, t) -> np.ndarray:
    """grad_x log h(x, t)_k for every class k by reverse-mode, shape (n, c, d)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    tt = np.full(n, t) if np.ndim(t) == 0 else np.asarray(t)
    grads = []
    for k in range(classifier.classes):
        xin = nn.Tensor(x, requires_grad=True)
        with nn.Tape() as tape:
            logp = classifier.log_probs_tensor(xin, tt)
            picked = nn.sum_(nn.mul(logp, np.eye(classifier.classes)[k]))
        tape.backward(picked)
        grads.append(xin.grad)
        tape.clear()
    classifier.params.zero_grad()
    return np.stack(grads, axis=1)
