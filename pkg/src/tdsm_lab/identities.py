"""Registry of analytic identities checked by ``tdsm-lab verify``.

Each checker returns the worst absolute error over a grid of points and
times.  Names must match the ``IDENTITIES`` tuples declared by the modules
that provide the underlying functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gmm_oracle as oracle
from . import sampler
from .metrics import GridSpec
from .objectives import WeightEstimator

REGISTRY: dict[str, tuple[Callable, float]] = {}


def identity(name: str, tol: float = 1e-9):
    def register(fn):
        if name in REGISTRY:
            raise ValueError(f"identity {name!r} registered twice")
        REGISTRY[name] = (fn, tol)
        return fn
    return register


def declared() -> set[str]:
    return set(oracle.IDENTITIES) | set(sampler.IDENTITIES)


@dataclass
class Check:
    name: str
    worst: float
    tol: float
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(np.isfinite(self.worst)) and self.worst < self.tol


def _each(gmm, grid: GridSpec):
    pts = grid.points()
    for t in grid.times:
        for k in range(gmm.classes):
            yield pts, np.full(len(pts), k), float(t)


@identity("noisy_score_convex_combination", 1e-10)
def _convex_combination(gmm, sched, S, grid):
    worst = 0.0
    for x, ny, t in _each(gmm, grid):
        w = oracle.weight_vectors(gmm, sched, S, x, ny, t)
        combo = np.einsum("nc,ncd->nd", w, oracle.clean_scores(gmm, sched, x, t))
        worst = max(worst, np.abs(oracle.noisy_score(gmm, sched, S, x, ny, t) - combo).max())
    return worst


@identity("weight_equals_posterior", 1e-10)
def _posterior(gmm, sched, S, grid):
    worst = 0.0
    for x, ny, t in _each(gmm, grid):
        for y in range(gmm.classes):
            a = oracle.exact_weight(gmm, sched, S, x, ny, y, t)
            b = oracle.posterior_weight(gmm, sched, S, x, ny, y, t)
            worst = max(worst, np.abs(a - b).max())
    return worst


@identity("weights_on_simplex", 1e-12)
def _simplex(gmm, sched, S, grid):
    worst = 0.0
    for x, ny, t in _each(gmm, grid):
        w = oracle.weight_vectors(gmm, sched, S, x, ny, t)
        worst = max(worst, np.abs(w.sum(axis=-1) - 1.0).max(), max(0.0, -w.min()))
    return worst


@identity("weight_estimator_exact")
def _eq7(gmm, sched, S, grid):
    counts = oracle.noisy_prior(gmm, S)
    est = WeightEstimator(S, counts)
    worst = 0.0
    for x, ny, t in _each(gmm, grid):
        w_hat = est(oracle.oracle_noisy_classifier(gmm, sched, S, x, t), ny)
        worst = max(worst, np.abs(w_hat - oracle.weight_vectors(gmm, sched, S, x, ny, t)).max())
    return worst


@identity("noisy_classifier_bayes")
def _bayes(gmm, sched, S, grid):
    s = np.asarray(getattr(S, "entries", S))
    p_noisy = oracle.noisy_prior(gmm, S)
    worst = 0.0
    pts = grid.points()
    for t in grid.times:
        # p(noisy = i | x) proportional to p(i) sum_y S[i, y] p_t(x | y)
        log_dens = oracle.log_class_densities(gmm, sched, pts, t)
        m = log_dens.max(axis=-1, keepdims=True)
        unnorm = p_noisy * (np.exp(log_dens - m) @ s.T)
        direct = unnorm / unnorm.sum(axis=-1, keepdims=True)
        worst = max(worst, np.abs(direct - oracle.oracle_noisy_classifier(gmm, sched, S, pts, t)).max())
    return worst


@identity("sdsm_fixed_point_consistency")
def _sdsm(gmm, sched, S, grid):
    s = np.asarray(getattr(S, "entries", S))
    worst = 0.0
    pts = grid.points()
    for t in grid.times:
        fp = np.stack([oracle.sdsm_fixed_point(gmm, sched, S, pts, y, t) for y in range(gmm.classes)], axis=-2)
        for k in range(gmm.classes):
            lhs = np.einsum("c,ncd->nd", s[k], fp)
            worst = max(worst, np.abs(lhs - oracle.noisy_score(gmm, sched, S, pts, k, t)).max())
    return worst


def _central_diff(f, x, h: float, order: int = 2) -> np.ndarray:
    cols = []
    for e in np.eye(x.shape[-1]):
        if order == 2:
            cols.append((f(x + h * e) - f(x - h * e)) / (2 * h))
        else:
            cols.append((-f(x + 2 * h * e) + 8 * f(x + h * e) - 8 * f(x - h * e) + f(x - 2 * h * e)) / (12 * h))
    return np.stack(cols, axis=-1)


@identity("marginal_score_mixture", 1e-7)
def _marginal(gmm, sched, S, grid):
    worst = 0.0
    pts = grid.points()
    for t in grid.times:
        fd = _central_diff(lambda z: oracle.log_marginal(gmm, sched, z, t), pts, 1e-4, order=4)
        worst = max(worst, np.abs(oracle.marginal_score(gmm, sched, pts, t) - fd).max())
    return worst


@identity("score_finite_difference", 1e-7)
def _fd(gmm, sched, S, grid):
    # Class log-densities are quadratic in x, so a central difference is
    # exact up to rounding and a coarse step keeps rounding small.
    worst = 0.0
    for x, y, t in _each(gmm, grid):
        logp = lambda z: oracle.log_class_densities(gmm, sched, z, t)[np.arange(len(z)), y]
        fd = _central_diff(logp, x, 1e-2)
        worst = max(worst, np.abs(oracle.clean_score(gmm, sched, x, y, t) - fd).max())
    return worst


@identity("noisy_log_prob_grad_forms")
def _grad_forms(gmm, sched, S, grid):
    worst = 0.0
    pts = grid.points()
    for t in grid.times:
        a = oracle.oracle_noisy_log_prob_grads(gmm, sched, S, pts, t)
        b = np.stack([oracle.noisy_score(gmm, sched, S, pts, k, t) for k in range(gmm.classes)], axis=-2)
        worst = max(worst, np.abs(a - (b - oracle.marginal_score(gmm, sched, pts, t)[..., None, :])).max())
    return worst


@identity("classifier_guidance_oracle")
def _cg(gmm, sched, S, grid):
    uncond = lambda x, t: oracle.marginal_score(gmm, sched, x, t)

    def grad(x, y, t):
        G = oracle.oracle_clean_log_prob_grads(gmm, sched, x, t)
        return G[np.arange(len(x)), y]

    worst = 0.0
    for x, y, t in _each(gmm, grid):
        g = sampler.guided_score_cg(uncond, grad, 1.0, x, y, t)
        worst = max(worst, np.abs(g - oracle.clean_score(gmm, sched, x, y, t)).max())
    return worst


@identity("transition_aware_guidance_oracle", 1e-6)
def _tcg(gmm, sched, S, grid):
    uncond = lambda x, t: oracle.marginal_score(gmm, sched, x, t)
    noisy_grads = lambda x, t: oracle.oracle_noisy_log_prob_grads(gmm, sched, S, x, t)
    wmat = lambda x, t: oracle.weight_matrices(gmm, sched, S, x, t)
    worst = 0.0
    for x, y, t in _each(gmm, grid):
        g = sampler.guided_score_tcg(uncond, noisy_grads, wmat, x, y, t)
        worst = max(worst, np.abs(g - oracle.clean_score(gmm, sched, x, y, t)).max())
    return worst


@identity("affine_noisy_reconstruction")
def _affine(gmm, sched, S, grid):
    score_fn = sampler.oracle_score_fn(gmm, sched)
    weight_fn = lambda x, ny, t: oracle.weight_vectors(gmm, sched, S, x, ny, t)
    worst = 0.0
    lam = 1.0
    for x, y, t in _each(gmm, grid):
        a = sampler.affine_score(score_fn, weight_fn, lam, x, y, t, gmm.classes)
        b = (1 + lam) * oracle.clean_score(gmm, sched, x, y, t) - lam * oracle.noisy_score(gmm, sched, S, x, y, t)
        worst = max(worst, np.abs(a - b).max())
    return worst


def run_all(gmm, sched, S, grid: GridSpec = GridSpec()) -> list[Check]:
    """Run every registered identity.  A singular S is reported, not raised."""
    out = []
    for name, (fn, tol) in REGISTRY.items():
        try:
            worst = float(fn(gmm, sched, S, grid))
            out.append(Check(name, worst, tol))
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            out.append(Check(name, float("nan"), tol, error=f"{type(exc).__name__}: {exc}"))
    return out
