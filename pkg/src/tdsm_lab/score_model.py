"""Conditional score MLP s(x, y, t) over [x, class embedding, time features]."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import nn_core as nn

DIRECT = "direct-score"
NOISE = "noise-prediction"


@dataclass
class Arch:
    hidden: tuple[int, ...] = (128, 128, 128)
    class_embed: int = 16
    time_embed: int = 32

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.time_embed % 2:
            raise ValueError("time_embed must be even (sin/cos pairs)")


@lru_cache(maxsize=8)
def _frequencies(dim: int) -> np.ndarray:
    return 0.25 * np.geomspace(1.0, 100.0, dim // 2)


def time_embedding(t, dim: int = 32) -> np.ndarray:
    """Sinusoidal features of log t at geometric frequencies.

    Frequencies run from 1/4 to 25 rad per unit of log t, so the slowest pair
    does not wrap over log t in [log 0.05, log 10].  Returns shape
    ``t.shape + (dim,)``; every sin/cos pair has unit norm.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("time_embedding needs t > 0")
    a = np.log(t)[..., None] * _frequencies(dim)
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1)


class ScoreModel:
    """MLP score network with a learned class embedding.

    ``null_class=True`` adds an extra embedding row (index ``classes``) used
    as the unconditional label for classifier-free guidance.
    """

    def __init__(self, data_dim: int, classes: int, arch: Arch | None = None,
                 parameterization: str = DIRECT, seed: int = 0, null_class: bool = False,
                 zero_last: bool = True):
        if parameterization not in (DIRECT, NOISE):
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.data_dim, self.classes = data_dim, classes
        self.arch = arch or Arch()
        self.parameterization = parameterization
        self.null_class = null_class
        self.params = nn.ParamStore()
        rng = np.random.Generator(np.random.Philox(seed))
        rows = classes + (1 if null_class else 0)
        self.params.add("embed", rng.normal(size=(rows, self.arch.class_embed)))
        width = data_dim + self.arch.class_embed + self.arch.time_embed
        for i, h in enumerate(self.arch.hidden):
            nn.init_dense(self.params, f"l{i}", width, h, rng)
            width = h
        nn.init_dense(self.params, "out", width, data_dim, rng, zero=zero_last)

    @property
    def null_index(self) -> int:
        if not self.null_class:
            raise ValueError("model was built without a null class")
        return self.classes

    def _check_labels(self, y: np.ndarray) -> None:
        hi = self.classes + (1 if self.null_class else 0)
        if y.size and (y.min() < 0 or y.max() >= hi):
            raise IndexError(f"class index out of range [0, {hi})")

    def raw_tensor(self, x, y, t) -> nn.Tensor:
        """MLP output as a tape Tensor (score or noise estimate)."""
        xv = x.value if isinstance(x, nn.Tensor) else np.asarray(x, dtype=np.float64)
        y = np.broadcast_to(np.asarray(y, dtype=np.intp), xv.shape[:-1])
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), xv.shape[:-1])
        self._check_labels(y)
        p = self.params
        h = nn.concat([x, nn.take_rows(p["embed"], y), time_embedding(t, self.arch.time_embed)])
        for i in range(len(self.arch.hidden)):
            h = nn.silu(nn.dense(h, p[f"l{i}.w"], p[f"l{i}.b"]))
        return nn.dense(h, p["out.w"], p["out.b"])

    def score_tensor(self, x, y, t) -> nn.Tensor:
        if self.parameterization == DIRECT:
            return self.raw_tensor(x, y, t)
        t = np.asarray(t, dtype=np.float64)
        if np.any(t == 0):
            raise ZeroDivisionError("noise-prediction score is undefined at t = 0")
        raw = self.raw_tensor(x, y, t)
        return nn.mul(raw, -1.0 / np.broadcast_to(t, raw.shape[:-1])[..., None])

    def score(self, x, y, t) -> np.ndarray:
        with nn.no_grad():
            return self.score_tensor(x, y, t).value

    def denoiser_tensor(self, x, y, t) -> nn.Tensor:
        """D(x, y, t) = x + t^2 s(x, y, t)."""
        t2 = np.broadcast_to(np.asarray(t, dtype=np.float64) ** 2, np.shape(x.value if isinstance(x, nn.Tensor) else x)[:-1])
        return nn.add(x, nn.mul(self.score_tensor(x, y, t), t2[..., None]))

    def denoise(self, x, y, t) -> np.ndarray:
        with nn.no_grad():
            return self.denoiser_tensor(x, y, t).value

    def header(self) -> dict:
        return {
            "kind": "score_model",
            "data_dim": self.data_dim,
            "classes": self.classes,
            "parameterization": self.parameterization,
            "null_class": self.null_class,
            "arch": asdict(self.arch),
        }

    def save(self, path, extra: dict | None = None) -> None:
        self.params.save(path, header={**self.header(), **(extra or {})})

    @classmethod
    def load(cls, path) -> "ScoreModel":
        store, header = nn.ParamStore.load(path)
        if header.get("kind") != "score_model":
            raise ValueError(f"{path} is not a score model checkpoint")
        model = cls(header["data_dim"], header["classes"], Arch(**header["arch"]),
                    header["parameterization"], null_class=header["null_class"])
        model.params = store
        return model


def score_forward(model: ScoreModel, x, y, t) -> np.ndarray:
    return model.score(x, y, t)


def denoiser_forward(model: ScoreModel, x, y, t) -> np.ndarray:
    return model.denoise(x, y, t)
