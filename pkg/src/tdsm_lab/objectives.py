"""Score-matching objectives for noisy-label conditional training.

All objectives share one batch layout (``PerturbedBatch``) so that a common
noise draw can be replayed across objectives; with an identity transition
matrix the weighted objectives reduce bit-for-bit to their unweighted forms.

Weighted objectives follow the training loop of the method: only the score
output for the given (noisy) label is differentiated, the other class
outputs are stop-gradient, and non-target classes whose weight is at or
below ``skip_threshold`` are not evaluated at all.  Skipped mass is not
renormalised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn_core as nn
from .label_noise import TransitionMatrix

log = logging.getLogger(__name__)

DSM, SDSM, TDSM, TDSM_RC, DSM_RC = "DSM", "SDSM", "TDSM", "TDSM-RC", "DSM-RC"
KINDS = (DSM, SDSM, TDSM, TDSM_RC, DSM_RC)

WeightFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class DegenerateClassifier(FloatingPointError):
    pass


@dataclass
class ObjectiveConfig:
    kind: str = TDSM
    skip_threshold: float = 0.01
    temporal_weight: str = "sigma2"
    detach_nontarget: bool = True
    weight_source: str = "oracle"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not 0.0 <= self.skip_threshold < 1.0:
            raise ValueError("skip_threshold must lie in [0, 1)")
        if self.temporal_weight not in ("sigma2", "one"):
            raise ValueError(f"unknown temporal weight {self.temporal_weight!r}")
        if self.weight_source not in ("oracle", "classifier"):
            raise ValueError(f"unknown weight source {self.weight_source!r}")

    @property
    def weighted(self) -> bool:
        return self.kind in (SDSM, TDSM, TDSM_RC)


@dataclass
class PerturbedBatch:
    x0: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    z: np.ndarray

    @property
    def xt(self) -> np.ndarray:
        return self.x0 + self.t[:, None] * self.z

    def __len__(self) -> int:
        return self.x0.shape[0]


def draw_batch(instances, labels, batch_size: int, rng: np.random.Generator,
               t_lo: float = 0.05, t_hi: float = 10.0) -> PerturbedBatch:
    """Uniform minibatch, log-uniform times, standard normal perturbation."""
    n = instances.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    idx = rng.integers(0, n, size=batch_size)
    t = np.exp(rng.uniform(np.log(t_lo), np.log(t_hi), size=batch_size))
    z = rng.standard_normal((batch_size, instances.shape[1]))
    return PerturbedBatch(instances[idx], np.asarray(labels)[idx], t, z)


def dsm_target(x0, xt, t) -> np.ndarray:
    """grad log N(xt; x0, t^2 I) = -(xt - x0) / t^2."""
    t = np.asarray(t, dtype=np.float64)
    return -(np.asarray(xt) - np.asarray(x0)) / (t ** 2)[..., None]


def temporal_weight(cfg: ObjectiveConfig, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return t ** 2 if cfg.temporal_weight == "sigma2" else np.ones_like(t)


class WeightEstimator:
    """Transition-aware weights from a noisy-label classifier.

    w_hat[y] = S[ny, y] n[ny] / h[ny] * sum_i inv(S)[y, i] h[i] / n[i]

    ``inv(S)`` is computed once here.  Estimates are returned as-is; they can
    leave the simplex when the classifier is imperfect, and
    ``last_deviation`` records the worst |sum - 1| of the latest call.
    """

    floor = 1e-12

    def __init__(self, S, counts):
        s = S.entries if isinstance(S, TransitionMatrix) else np.asarray(S, dtype=np.float64)
        self.S = s
        self.S_inv = np.linalg.inv(s)
        self.counts = np.asarray(counts, dtype=np.float64)
        if np.any(self.counts <= 0):
            raise ValueError("every noisy class needs a positive count")
        self.last_deviation = 0.0

    def __call__(self, probs, noisy_labels) -> np.ndarray:
        h = np.asarray(probs, dtype=np.float64)
        ny = np.asarray(noisy_labels, dtype=np.intp)
        h_target = np.take_along_axis(h, ny[..., None], axis=-1)
        if np.any(h_target < self.floor):
            raise DegenerateClassifier("classifier gives the observed noisy label probability below 1e-12")
        q = (h / self.counts) @ self.S_inv.T
        w = self.S[ny] * q * (self.counts[ny][..., None] / h_target)
        self.last_deviation = float(np.max(np.abs(w.sum(axis=-1) - 1.0))) if w.size else 0.0
        return w


def estimate_weights(classifier_output, S, counts, noisy_label) -> np.ndarray:
    return WeightEstimator(S, counts)(classifier_output, noisy_label)


def classifier_weight_fn(classifier, S, counts) -> WeightFn:
    est = WeightEstimator(S, counts)

    def weights(xt, labels, t):
        return est(classifier.classify(xt, t), labels)

    weights.estimator = est
    return weights


def oracle_weight_fn(gmm, sched, S) -> WeightFn:
    from .gmm_oracle import weight_vectors

    def weights(xt, labels, t):
        return weight_vectors(gmm, sched, S, xt, labels, t)

    return weights


def constant_weight_fn(S) -> WeightFn:
    s = S.entries if isinstance(S, TransitionMatrix) else np.asarray(S, dtype=np.float64)

    def weights(xt, labels, t):
        return s[np.asarray(labels, dtype=np.intp)]

    return weights


def included_terms(weights: np.ndarray, labels: np.ndarray, tau: float) -> np.ndarray:
    """Mask of (sample, class) terms kept in the weighted sum."""
    keep = weights > tau
    keep[np.arange(len(labels)), labels] = True
    return keep


def _combine(model, batch: PerturbedBatch, weights: np.ndarray, cfg: ObjectiveConfig,
             denoise: bool) -> nn.Tensor:
    """sum_y w_y * f(xt, y, t) with the detach and skip rules; f is score or denoiser."""
    forward = model.denoiser_tensor if denoise else model.score_tensor
    xt, labels, t = batch.xt, batch.labels, batch.t
    keep = included_terms(weights, labels, cfg.skip_threshold)
    n = len(batch)
    rows = np.arange(n)
    out = nn.mul(forward(xt, labels, t), weights[rows, labels][:, None])
    classes = weights.shape[1]
    for y in range(classes):
        sel = keep[:, y] & (labels != y)
        if not sel.any():
            continue
        if cfg.detach_nontarget:
            with nn.no_grad():
                part = forward(xt[sel], np.full(sel.sum(), y), t[sel]).value
            extra = np.zeros((n, xt.shape[1]))
            extra[sel] = weights[sel, y][:, None] * part
            out = nn.add(out, extra)
        else:
            coef = np.where(sel, weights[:, y], 0.0)
            out = nn.add(out, nn.mul(forward(xt, np.full(n, y), t), coef[:, None]))
    return out


def _per_sample_sq(residual: nn.Tensor, lam: np.ndarray) -> nn.Tensor:
    return nn.mul(nn.sum_(nn.square(residual), axis=1), lam)


def dsm_terms(model, batch: PerturbedBatch, cfg: ObjectiveConfig) -> nn.Tensor:
    target = dsm_target(batch.x0, batch.xt, batch.t)
    s = model.score_tensor(batch.xt, batch.labels, batch.t)
    return _per_sample_sq(nn.sub(s, target), temporal_weight(cfg, batch.t))


def dsm_rc_terms(model, batch: PerturbedBatch, cfg: ObjectiveConfig) -> nn.Tensor:
    d = model.denoiser_tensor(batch.xt, batch.labels, batch.t)
    return _per_sample_sq(nn.sub(d, batch.x0), temporal_weight(cfg, batch.t))


def weighted_terms(model, batch: PerturbedBatch, weights: np.ndarray, cfg: ObjectiveConfig,
                   denoise: bool = False) -> nn.Tensor:
    combined = _combine(model, batch, weights, cfg, denoise)
    ref = batch.x0 if denoise else dsm_target(batch.x0, batch.xt, batch.t)
    return _per_sample_sq(nn.sub(combined, ref), temporal_weight(cfg, batch.t))


def dsm_loss(model, batch, cfg: ObjectiveConfig) -> nn.Tensor:
    return nn.mean(dsm_terms(model, batch, cfg))


def tdsm_loss(model, batch, weight_fn: WeightFn, cfg: ObjectiveConfig) -> nn.Tensor:
    w = weight_fn(batch.xt, batch.labels, batch.t)
    return nn.mean(weighted_terms(model, batch, w, cfg))


def sdsm_loss(model, batch, S, cfg: ObjectiveConfig) -> nn.Tensor:
    w = constant_weight_fn(S)(batch.xt, batch.labels, batch.t)
    return nn.mean(weighted_terms(model, batch, w, cfg))


def tdsm_rc_loss(model, batch, weight_fn: WeightFn, cfg: ObjectiveConfig) -> nn.Tensor:
    w = weight_fn(batch.xt, batch.labels, batch.t)
    return nn.mean(weighted_terms(model, batch, w, cfg, denoise=True))


def objective_terms(model, batch: PerturbedBatch, cfg: ObjectiveConfig, S=None,
                    weight_fn: WeightFn | None = None) -> nn.Tensor:
    """Per-sample loss terms for the configured objective."""
    if cfg.kind == DSM:
        return dsm_terms(model, batch, cfg)
    if cfg.kind == DSM_RC:
        return dsm_rc_terms(model, batch, cfg)
    if cfg.kind == SDSM:
        if S is None:
            raise ValueError("SDSM needs a reverse transition matrix")
        w = constant_weight_fn(S)(batch.xt, batch.labels, batch.t)
        return weighted_terms(model, batch, w, cfg)
    if weight_fn is None:
        raise ValueError(f"{cfg.kind} needs a weight source")
    w = weight_fn(batch.xt, batch.labels, batch.t)
    return weighted_terms(model, batch, w, cfg, denoise=cfg.kind == TDSM_RC)


def objective_loss(model, batch, cfg, S=None, weight_fn=None) -> nn.Tensor:
    return nn.mean(objective_terms(model, batch, cfg, S, weight_fn))


def fit_score_model(model, instances, labels, cfg: ObjectiveConfig, *, S=None, weight_fn=None,
                    steps: int = 20000, batch_size: int = 256, lr: float = 1e-3, seed: int = 0,
                    t_lo: float = 0.05, t_hi: float = 10.0, uncond_prob: float = 0.0,
                    log_every: int = 0) -> list[tuple[int, float]]:
    """Adam training loop.  Returns the per-step loss trace.

    With ``uncond_prob > 0`` (models built with a null class) that fraction
    of each batch is trained with plain DSM on the null label.
    """
    if uncond_prob and not getattr(model, "null_class", False):
        raise ValueError("uncond_prob needs a model with a null class")
    rng = np.random.Generator(np.random.Philox(seed))
    opt = nn.Adam(model.params, lr=lr)
    trace = []
    for step in range(steps):
        batch = draw_batch(instances, labels, batch_size, rng, t_lo, t_hi)
        model.params.zero_grad()
        with nn.Tape() as tape:
            if uncond_prob:
                drop = rng.random(batch_size) < uncond_prob
                loss = _mixed_loss(model, batch, drop, cfg, S, weight_fn)
            else:
                loss = objective_loss(model, batch, cfg, S, weight_fn)
        tape.backward(loss)
        tape.clear()
        opt.step()
        value = float(loss.value)
        if not np.isfinite(value):
            raise FloatingPointError(f"loss became non-finite at step {step}")
        trace.append((step, value))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, value)
    model.params.assert_finite()
    return trace


def _sub(batch: PerturbedBatch, mask) -> PerturbedBatch:
    return PerturbedBatch(batch.x0[mask], batch.labels[mask], batch.t[mask], batch.z[mask])


def _mixed_loss(model, batch, drop, cfg, S, weight_fn) -> nn.Tensor:
    n = len(batch)
    parts = []
    if (~drop).any():
        parts.append(nn.sum_(objective_terms(model, _sub(batch, ~drop), cfg, S, weight_fn)))
    if drop.any():
        ub = _sub(batch, drop)
        ub = PerturbedBatch(ub.x0, np.full(len(ub), model.null_index), ub.t, ub.z)
        parts.append(nn.sum_(dsm_terms(model, ub, cfg)))
    total = parts[0] if len(parts) == 1 else nn.add(parts[0], parts[1])
    return nn.mul(total, 1.0 / n)
