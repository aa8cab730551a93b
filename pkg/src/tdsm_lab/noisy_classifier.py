"""Time-dependent noisy-label classifier and transition-matrix estimation.

The classifier models p_t(noisy label | x_t).  Optionally its softmax is
pushed through a forward transition matrix (``softmax @ T``), either a fixed
one or a trainable one learned jointly by volume minimisation.
"""

from __future__ import annotations

import logging

import numpy as np

from . import nn_core as nn
from .label_noise import FORWARD, NoisyDataset, TransitionMatrix
from .score_model import time_embedding

log = logging.getLogger(__name__)

DIAGONAL_OFFSET = 2.0
FREEZE_FRACTION = 0.25
DET_FLOOR = 1e-6


class IllConditionedTransition(np.linalg.LinAlgError):
    """The estimated transition matrix collapsed towards singular."""


class TrainableTransition:
    """Row-softmax parameterisation of a c x c forward matrix.

    The logits live in the classifier's parameter store under ``name`` and
    start at ``offset`` on the diagonal, zero elsewhere.
    """

    def __init__(self, store: nn.ParamStore, classes: int, offset: float = DIAGONAL_OFFSET,
                 name: str = "transition"):
        self.store, self.classes, self.name = store, classes, name
        store.add(name, offset * np.eye(classes))

    def tensor(self) -> nn.Tensor:
        return nn.softmax(self.store[self.name])

    def matrix(self) -> np.ndarray:
        with nn.no_grad():
            return self.tensor().value

    def realized(self) -> TransitionMatrix:
        return TransitionMatrix(self.matrix(), FORWARD)


class NoisyClassifier:
    """MLP over [x, time features] with a softmax head.

    ``simplex_projection`` is a fixed forward matrix T; when given, outputs
    are ``softmax @ T`` and therefore live in the simplex spanned by T's
    rows.  ``trainable_transition=True`` attaches a :class:`TrainableTransition`
    that plays the same role but is learned.
    """

    def __init__(self, data_dim: int, classes: int, hidden=(128, 128, 128), time_embed: int = 32,
                 seed: int = 0, simplex_projection: TransitionMatrix | None = None,
                 trainable_transition: bool = False, zero_last: bool = True):
        if simplex_projection is not None and trainable_transition:
            raise ValueError("use either a fixed projection or a trainable transition, not both")
        if simplex_projection is not None:
            if simplex_projection.orientation != FORWARD:
                raise ValueError("simplex projection needs a forward (clean -> noisy) matrix")
            if simplex_projection.c != classes:
                raise ValueError("projection size does not match class count")
        self.data_dim, self.classes = data_dim, classes
        self.hidden, self.time_embed = tuple(int(h) for h in hidden), time_embed
        self.simplex_projection = simplex_projection
        self.params = nn.ParamStore()
        rng = np.random.Generator(np.random.Philox(seed))
        width = data_dim + time_embed
        for i, h in enumerate(self.hidden):
            nn.init_dense(self.params, f"l{i}", width, h, rng)
            width = h
        nn.init_dense(self.params, "out", width, classes, rng, zero=zero_last)
        self.transition = TrainableTransition(self.params, classes) if trainable_transition else None

    def logits_tensor(self, x, t) -> nn.Tensor:
        xv = x.value if isinstance(x, nn.Tensor) else np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), xv.shape[:-1])
        h = nn.concat([x, time_embedding(t, self.time_embed)])
        for i in range(len(self.hidden)):
            h = nn.silu(nn.dense(h, self.params[f"l{i}.w"], self.params[f"l{i}.b"]))
        return nn.dense(h, self.params["out.w"], self.params["out.b"])

    def projection_tensor(self):
        if self.transition is not None:
            return self.transition.tensor()
        if self.simplex_projection is not None:
            return nn.Tensor(self.simplex_projection.entries)
        return None

    def clean_probs_tensor(self, x, t) -> nn.Tensor:
        return nn.softmax(self.logits_tensor(x, t))

    def probs_tensor(self, x, t) -> nn.Tensor:
        """Noisy-label probabilities (after projection, if any)."""
        p = self.clean_probs_tensor(x, t)
        proj = self.projection_tensor()
        return p if proj is None else nn.matmul(p, proj)

    def log_probs_tensor(self, x, t) -> nn.Tensor:
        if self.projection_tensor() is None:
            return nn.log_softmax(self.logits_tensor(x, t))
        return nn.log(self.probs_tensor(x, t))

    def classify(self, x, t) -> np.ndarray:
        with nn.no_grad():
            return self.probs_tensor(x, t).value

    def header(self) -> dict:
        doc = {"kind": "noisy_classifier", "data_dim": self.data_dim, "classes": self.classes,
               "hidden": list(self.hidden), "time_embed": self.time_embed,
               "trainable_transition": self.transition is not None}
        if self.simplex_projection is not None:
            doc["simplex_projection"] = self.simplex_projection.to_json()
        return doc

    def save(self, path) -> None:
        self.params.save(path, header=self.header())

    @classmethod
    def load(cls, path) -> "NoisyClassifier":
        store, header = nn.ParamStore.load(path)
        if header.get("kind") != "noisy_classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        proj = header.get("simplex_projection")
        clf = cls(header["data_dim"], header["classes"], header["hidden"], header["time_embed"],
                  simplex_projection=TransitionMatrix.from_json(proj) if proj else None,
                  trainable_transition=header["trainable_transition"])
        clf.params = store
        if clf.transition is not None:
            clf.transition.store = store
        return clf


def _check_dataset(dataset: NoisyDataset) -> None:
    if len(dataset.noisy_labels) == 0:
        raise ValueError("empty dataset")


def _batch(dataset: NoisyDataset, batch_size, rng, t_lo, t_hi):
    n = len(dataset.noisy_labels)
    idx = rng.integers(0, n, size=batch_size)
    t = np.exp(rng.uniform(np.log(t_lo), np.log(t_hi), size=batch_size))
    xt = dataset.instances[idx] + t[:, None] * rng.standard_normal((batch_size, dataset.instances.shape[1]))
    return xt, t, np.eye(dataset.classes)[dataset.noisy_labels[idx]]


def cross_entropy(clf: NoisyClassifier, xt, t, onehot) -> nn.Tensor:
    if clf.projection_tensor() is None:
        return nn.softmax_cross_entropy(clf.logits_tensor(xt, t), onehot)
    return nn.nll_of_probs(clf.probs_tensor(xt, t), onehot)


def train_classifier(clf: NoisyClassifier, dataset: NoisyDataset, sched=None, steps: int = 5000,
                     seed: int = 0, batch_size: int = 256, lr: float = 1e-3, t_lo: float = 0.05,
                     t_hi: float = 10.0, frozen=("transition",)):
    """Cross-entropy against noisy labels on perturbed inputs, times log-uniform.

    Returns ``(clf, trace)`` with ``trace`` a list of (step, loss).  A
    trainable transition, if present, is held fixed unless ``frozen`` is
    emptied.
    """
    _check_dataset(dataset)
    if sched is not None:
        t_lo, t_hi = max(t_lo, sched.t_min), min(t_hi, sched.t_max)
    rng = np.random.Generator(np.random.Philox(seed))
    opt = nn.Adam(clf.params, lr=lr, frozen=set(frozen) & set(clf.params.names()))
    trace = []
    for step in range(steps):
        xt, t, onehot = _batch(dataset, batch_size, rng, t_lo, t_hi)
        clf.params.zero_grad()
        with nn.Tape() as tape:
            loss = cross_entropy(clf, xt, t, onehot)
        tape.backward(loss)
        tape.clear()
        opt.step()
        trace.append((step, float(loss.value)))
    clf.params.assert_finite()
    return clf, trace


def estimate_transition_volmin(clf: NoisyClassifier, dataset: NoisyDataset, sched=None,
                               steps: int = 8000, vol_weight: float = 1e-2, seed: int = 0,
                               batch_size: int = 256, lr: float = 1e-3, t_lo: float = 0.05,
                               t_hi: float = 10.0, freeze_fraction: float = FREEZE_FRACTION):
    """Joint classifier / transition fit: CE(softmax @ T, noisy) + vol_weight * log|det T|.

    T is updated only during the first ``freeze_fraction`` of the steps; the
    classifier keeps training afterwards.  Raises ``IllConditionedTransition``
    if |det T| falls below ``DET_FLOOR`` or det T changes sign.  Returns ``(T_hat, clf, trace)``
    with ``T_hat`` a forward :class:`TransitionMatrix`.
    """
    if clf.transition is None:
        raise ValueError("classifier has no trainable transition")
    _check_dataset(dataset)
    if sched is not None:
        t_lo, t_hi = max(t_lo, sched.t_min), min(t_hi, sched.t_max)
    rng = np.random.Generator(np.random.Philox(seed))
    opt = nn.Adam(clf.params, lr=lr)
    freeze_at = int(round(freeze_fraction * steps))
    sign = np.sign(np.linalg.det(clf.transition.matrix()))
    trace = []
    for step in range(steps):
        if step == freeze_at:
            opt.frozen.add(clf.transition.name)
        xt, t, onehot = _batch(dataset, batch_size, rng, t_lo, t_hi)
        clf.params.zero_grad()
        with nn.Tape() as tape:
            loss = cross_entropy(clf, xt, t, onehot)
            if vol_weight and step < freeze_at:
                loss = nn.add(loss, nn.mul(nn.logabsdet(clf.transition.tensor()), vol_weight))
        tape.backward(loss)
        tape.clear()
        opt.step()
        det = float(np.linalg.det(clf.transition.matrix()))
        # a sign flip means the update stepped across a singular matrix
        if not np.isfinite(det) or abs(det) < DET_FLOOR or np.sign(det) != sign:
            raise IllConditionedTransition(f"transition determinant {det:.3g} at step {step}")
        trace.append((step, float(loss.value)))
    clf.params.assert_finite()
    return clf.transition.realized(), clf, trace
