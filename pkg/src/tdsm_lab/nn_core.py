"""Small reverse-mode autodiff over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays the vector-Jacobian products in reverse.  Everything
is float64.  Only what the score and classifier MLPs need is here: dense
layers, SiLU, embeddings, concatenation, elementwise arithmetic, softmax
heads and a log-determinant (for the volume penalty).
"""

from __future__ import annotations

import contextlib
import json
from typing import Callable, Iterator

import numpy as np

FORMAT_VERSION = 1

_ACTIVE: list["Tape"] = []
_PAUSED = [0]


class Tensor:
    """A value plus (optionally) a gradient slot and a backward closure."""

    __slots__ = ("value", "grad", "requires_grad", "_backward", "_buffer")

    def __init__(self, value, requires_grad: bool = False, grad_buffer: np.ndarray | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        # Leaf parameters accumulate straight into the owning ParamStore buffer.
        self._buffer = grad_buffer

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self._buffer is not None:
            self._buffer += g
        elif self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of the primitives run in a forward pass.

    Use as a context manager; nested tapes are allowed and the innermost
    one records.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        if not output.requires_grad:
            return
        output._accumulate(np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64))
        # Creation order is a topological order, so the reversed list is too.
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def clear(self) -> None:
        for node in self.nodes:
            node._backward = None
            node.grad = None
        self.nodes = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; results computed inside are constants."""
    _PAUSED[0] += 1
    try:
        yield
    finally:
        _PAUSED[0] -= 1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(value)
    if _ACTIVE and not _PAUSED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        _ACTIVE[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def detach(x) -> Tensor:
    """Stop-gradient: same value, no path back to the inputs."""
    return Tensor(_as_tensor(x).value)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _record(a.value * b.value, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.value, -1, -2))
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _record(a.value @ b.value, (a, b), backward)


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight of shape (fan_in, fan_out)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise ValueError(f"dense shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.value.T)
        if weight.requires_grad:
            xv = x.value.reshape(-1, x.shape[-1])
            weight._accumulate(xv.T @ g.reshape(-1, g.shape[-1]))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(x.value @ weight.value + bias.value, (x, weight, bias), backward)


def silu(x) -> Tensor:
    """x * sigmoid(x); smooth, odd-ish, zero at zero."""
    x = _as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))

    def backward(g):
        x._accumulate(g * (sig * (1.0 + x.value * (1.0 - sig))))

    return _record(x.value * sig, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.value)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return _record(y, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x._accumulate(g / x.value)

    return _record(np.log(x.value), (x,), backward)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p._accumulate(gp)

    return _record(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), backward)


def take_rows(table, index) -> Tensor:
    """Embedding lookup ``table[index]``."""
    table = _as_tensor(table)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, index, g)
        table._accumulate(gt)

    return _record(table.value[index], (table,), backward)


def sum_(x, axis=None) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _record(np.sum(x.value, axis=axis), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / n)


def square(x) -> Tensor:
    return mul(x, x)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    p = np.exp(_log_softmax(logits.value))

    def backward(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _record(p, (logits,), backward)


def log_softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    out = _log_softmax(logits.value)

    def backward(g):
        logits._accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _record(out, (logits,), backward)


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean over the batch of ``-sum(target * log_softmax(logits))``.

    ``target`` is a probability array of the logits' shape (one-hot for hard
    labels).  The gradient is ``(softmax - target) / batch``.
    """
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} != logits shape {logits.shape}")
    logp = _log_softmax(logits.value)
    n = logits.value.reshape(-1, logits.shape[-1]).shape[0]
    loss = -(target * logp).sum() / n

    def backward(g):
        p = np.exp(logp)
        logits._accumulate(g * (p * target.sum(axis=-1, keepdims=True) - target) / n)

    return _record(np.asarray(loss), (logits,), backward)


def nll_of_probs(probs, target) -> Tensor:
    """Mean cross-entropy when the model already outputs probabilities."""
    probs = _as_tensor(probs)
    target = np.asarray(target, dtype=np.float64)
    n = probs.value.reshape(-1, probs.shape[-1]).shape[0]
    floor = 1e-300
    pv = np.maximum(probs.value, floor)

    def backward(g):
        probs._accumulate(-g * target / pv / n)

    return _record(np.asarray(-(target * np.log(pv)).sum() / n), (probs,), backward)


def logabsdet(m) -> Tensor:
    """log|det M| for a square matrix; gradient is inv(M)^T."""
    m = _as_tensor(m)
    _, ld = np.linalg.slogdet(m.value)

    def backward(g):
        m._accumulate(g * np.linalg.inv(m.value).T)

    return _record(np.asarray(ld), (m,), backward)


class ParamStore:
    """Named float64 parameter arrays with congruent gradient buffers."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def tensor(self, name: str) -> Tensor:
        return Tensor(self.params[name], requires_grad=True, grad_buffer=self.grads[name])

    def __getitem__(self, name: str) -> Tensor:
        return self.tensor(name)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.copy())
        return out

    def assert_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite entries in parameter {k!r}")

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "arrays": {k: [format(float(e), ".17g") for e in v.ravel()] for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamStore":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {data.get('format_version')!r}")
        store = cls()
        for name, shape in data["shapes"].items():
            flat = np.array([float(s) for s in data["arrays"][name]], dtype=np.float64)
            store.add(name, flat.reshape(shape))
        return store

    def save(self, path, header: dict | None = None) -> None:
        doc = dict(header or {})
        doc.update(self.to_dict())
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        header = {k: v for k, v in doc.items() if k not in ("format_version", "shapes", "arrays")}
        return cls.from_dict(doc), header


def init_dense(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
               zero: bool = False) -> None:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    if zero:
        store.add(f"{name}.w", np.zeros((fan_in, fan_out)))
    else:
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


class SGD:
    def __init__(self, store: ParamStore, lr: float = 1e-2, frozen: set[str] | None = None):
        self.store, self.lr = store, lr
        self.frozen = set(frozen or ())

    def step(self) -> None:
        for k, p in self.store.params.items():
            if k not in self.frozen:
                p -= self.lr * self.store.grads[k]


class Adam:
    """Adam with bias correction.  ``frozen`` names are skipped."""

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 frozen: set[str] | None = None):
        self.store, self.lr, self.eps = store, lr, eps
        self.b1, self.b2 = betas
        self.frozen = set(frozen or ())
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.store.params.items():
            if k in self.frozen:
                continue
            g = self.store.grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_check(loss_fn: Callable[[ParamStore], Tensor], store: ParamStore, step: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn(store)`` must build a scalar Tensor from ``store`` tensors.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` set (at least 200 is sensible) a random subsample of
    coordinates is checked.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = loss_fn(store)
    tape.backward(loss)
    analytic = {k: g.copy() for k, g in store.grads.items()}
    tape.clear()
    store.zero_grad()

    coords = [(k, i) for k, v in store.params.items() for i in range(v.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        flat = store.params[name].reshape(-1)
        orig = flat[i]
        with no_grad():
            flat[i] = orig + step
            up = float(loss_fn(store).value)
            flat[i] = orig - step
            down = float(loss_fn(store).value)
        flat[i] = orig
        num = (up - down) / (2.0 * step)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        worst = max(worst, err)
    return worst
