"""Transition matrices and label corruption.

Class indices are 0-based throughout.  A forward matrix ``T`` holds
``T[i, j] = p(noisy=j | clean=i)``; a reverse matrix ``S`` holds
``S[i, j] = p(clean=j | noisy=i)``.  Both are row-stochastic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

FORWARD = "forward"
REVERSE = "reverse"

ROW_TOL = 1e-10


class InconsistentInputs(ValueError):
    """Priors and matrix cannot come from a common joint distribution."""


@dataclass(frozen=True)
class TransitionMatrix:
    entries: np.ndarray
    orientation: str = FORWARD

    def __post_init__(self):
        m = np.array(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"transition matrix must be square, got shape {m.shape}")
        if self.orientation not in (FORWARD, REVERSE):
            raise ValueError(f"orientation must be forward or reverse, got {self.orientation!r}")
        if np.any(m < -ROW_TOL) or np.any(m > 1 + ROW_TOL):
            raise ValueError("transition entries must lie in [0, 1]")
        if np.max(np.abs(m.sum(axis=1) - 1.0)) > ROW_TOL:
            raise ValueError("transition matrix rows must sum to 1")
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def c(self) -> int:
        return self.entries.shape[0]

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.entries))

    def to_json(self) -> dict:
        return {"orientation": self.orientation, "c": self.c,
                "rows": [[float(v) for v in row] for row in self.entries]}

    @classmethod
    def from_json(cls, doc: dict) -> "TransitionMatrix":
        tm = cls(np.array(doc["rows"], dtype=np.float64), doc["orientation"])
        if tm.c != int(doc["c"]):
            raise ValueError(f"matrix has {tm.c} rows but c = {doc['c']}")
        return tm

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "TransitionMatrix":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def make_symmetric(c: int, rate: float) -> TransitionMatrix:
    """Flip to each other class with probability rate/(c-1)."""
    if c < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= rate < (c - 1) / c:
        raise ValueError(f"symmetric rate must be in [0, {(c - 1) / c}) to stay diagonally dominant")
    m = np.full((c, c), rate / (c - 1))
    np.fill_diagonal(m, 1.0 - rate)
    return TransitionMatrix(m, FORWARD)


def make_resampled(c: int, rate: float) -> TransitionMatrix:
    """A fraction ``rate`` of labels is redrawn uniformly over all c classes.

    Equivalent to ``make_symmetric(c, rate * (c - 1) / c)``: for c = 2 a 40%
    resampling rate leaves 80% of labels intact.
    """
    if c < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= rate < 1.0:
        raise ValueError("resampling rate must be in [0, 1)")
    return TransitionMatrix((1.0 - rate) * np.eye(c) + rate / c, FORWARD)


def make_asymmetric(c: int, flips, rate: float) -> TransitionMatrix:
    """Row ``src`` moves ``rate`` of its mass to ``dst`` for each (src, dst) pair."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    m = np.eye(c)
    seen = set()
    for src, dst in flips:
        if src == dst:
            raise ValueError(f"flip {src}->{dst} maps a class to itself")
        if src in seen:
            raise ValueError(f"duplicate source class {src} in flips")
        if not (0 <= src < c and 0 <= dst < c):
            raise IndexError(f"flip {src}->{dst} out of range for c = {c}")
        seen.add(src)
        m[src, src] = 1.0 - rate
        m[src, dst] = rate
    return TransitionMatrix(m, FORWARD)


def _bayes_flip(m: np.ndarray, prior_from: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # m[i, j] = p(b=j | a=i); returns (p(a=j | b=i), p(b)).
    prior_to = m.T @ prior_from
    if np.any(prior_to <= 0):
        raise InconsistentInputs("a class has zero marginal probability")
    flipped = m.T * prior_from[None, :] / prior_to[:, None]
    return flipped, prior_to


def _solve_source_prior(m: np.ndarray, prior_to: np.ndarray) -> np.ndarray:
    # diag(1/p(b)) m^T p(a) = 1  <=>  m^T p(a) = p(b)
    try:
        prior_from = np.linalg.solve(m.T, prior_to)
    except np.linalg.LinAlgError as exc:
        raise InconsistentInputs("singular system while solving for the prior") from exc
    if np.any(prior_from < -1e-12):
        raise InconsistentInputs(f"solved prior has negative entries: {prior_from}")
    return np.clip(prior_from, 0.0, None)


def reverse_from_forward(T: TransitionMatrix, clean_prior=None, noisy_prior=None):
    """Bayes conversion T -> S.  Returns ``(S, other_prior)``.

    Give exactly one prior.  With ``clean_prior`` the noisy prior is
    ``T^T p(Y)``; with ``noisy_prior`` the clean prior is solved from the
    linear system ``T^T p(Y) = p(noisy)``.
    """
    if T.orientation != FORWARD:
        raise ValueError("expected a forward matrix")
    if (clean_prior is None) == (noisy_prior is None):
        raise ValueError("give exactly one of clean_prior / noisy_prior")
    m = T.entries
    if clean_prior is not None:
        clean = _check_prior(clean_prior, T.c)
        s, noisy = _bayes_flip(m, clean)
        return TransitionMatrix(_renorm(s), REVERSE), noisy
    noisy = _check_prior(noisy_prior, T.c)
    clean = _solve_source_prior(m, noisy)
    s, _ = _bayes_flip(m, clean)
    return TransitionMatrix(_renorm(s), REVERSE), clean


def forward_from_reverse(S: TransitionMatrix, noisy_prior=None, clean_prior=None):
    """Bayes conversion S -> T.  Returns ``(T, other_prior)``."""
    if S.orientation != REVERSE:
        raise ValueError("expected a reverse matrix")
    if (clean_prior is None) == (noisy_prior is None):
        raise ValueError("give exactly one of clean_prior / noisy_prior")
    m = S.entries
    if noisy_prior is not None:
        noisy = _check_prior(noisy_prior, S.c)
        t, clean = _bayes_flip(m, noisy)
        return TransitionMatrix(_renorm(t), FORWARD), clean
    clean = _check_prior(clean_prior, S.c)
    noisy = _solve_source_prior(m, clean)
    t, _ = _bayes_flip(m, noisy)
    return TransitionMatrix(_renorm(t), FORWARD), noisy


def _renorm(m: np.ndarray) -> np.ndarray:
    # Rows are stochastic up to rounding; remove the last-ulp drift.
    return m / m.sum(axis=1, keepdims=True)


def _check_prior(p, c: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (c,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"prior must be a length-{c} probability vector, got {p}")
    return p


def ensure_invertible(M: TransitionMatrix, mix: float) -> tuple[TransitionMatrix, float]:
    """Blend with the identity: ``(1 - mix) M + mix I``.  Returns (matrix, det)."""
    if not 0.0 <= mix < 1.0:
        raise ValueError("mix must be in [0, 1)")
    out = TransitionMatrix((1.0 - mix) * M.entries + mix * np.eye(M.c), M.orientation)
    return out, out.det


@dataclass
class NoisyDataset:
    instances: np.ndarray
    noisy_labels: np.ndarray
    clean_labels: np.ndarray | None = None
    classes: int = 2
    seed: int | None = None
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        if self.clean_labels is not None:
            self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
            if self.clean_labels.shape != self.noisy_labels.shape:
                raise ValueError("clean and noisy label arrays differ in length")
        if self.instances.ndim != 2 or self.instances.shape[0] != self.noisy_labels.shape[0]:
            raise ValueError("instances must be (n, d) with one label per row")
        for labels in (self.noisy_labels, self.clean_labels):
            if labels is not None and labels.size and (labels.min() < 0 or labels.max() >= self.classes):
                raise IndexError(f"labels must lie in [0, {self.classes})")
        self.counts = np.bincount(self.noisy_labels, minlength=self.classes)

    def __len__(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def to_csv(self, path, comment: str | None = None) -> None:
        d = self.dim
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i + 1}" for i in range(d)] + ["clean_label", "noisy_label"])
            for k in range(len(self)):
                clean = "" if self.clean_labels is None else int(self.clean_labels[k])
                w.writerow([repr(float(v)) for v in self.instances[k]] + [clean, int(self.noisy_labels[k])])

    @classmethod
    def from_csv(cls, path, classes: int) -> "NoisyDataset":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        header, body = rows[0], rows[1:]
        d = len(header) - 2
        if header[d:] != ["clean_label", "noisy_label"]:
            raise ValueError(f"unexpected dataset header {header}")
        x = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        noisy = np.array([int(r[d + 1]) for r in body], dtype=np.int64)
        clean_col = [r[d] for r in body]
        clean = None if any(v == "" for v in clean_col) else np.array([int(v) for v in clean_col])
        return cls(x, noisy, clean, classes=classes)


def corrupt_labels(instances, clean_labels, T: TransitionMatrix, seed: int) -> NoisyDataset:
    """Draw each noisy label from row ``T[clean]``.

    One uniform draw per instance; the noisy label is the first class whose
    cumulative row mass is strictly greater than the draw.
    """
    if T.orientation != FORWARD:
        raise ValueError("corruption needs a forward matrix")
    clean = np.asarray(clean_labels, dtype=np.int64)
    if clean.size and (clean.min() < 0 or clean.max() >= T.c):
        raise IndexError(f"clean labels must lie in [0, {T.c})")
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random(clean.shape[0])
    cum = np.cumsum(T.entries, axis=1)[clean]
    noisy = np.minimum((u[:, None] >= cum).sum(axis=1), T.c - 1)
    return NoisyDataset(instances, noisy, clean, classes=T.c, seed=seed)
