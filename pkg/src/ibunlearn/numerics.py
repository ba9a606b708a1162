"""Dense float64 arithmetic, small MLPs with explicit backward passes, and a
finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Randomness comes
from ``numpy.random.Generator`` backed by PCG64 (O'Neill, 2014); see
``seeded_rng``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

Tensor = np.ndarray
Rng = np.random.Generator


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when a loss (or one of its terms) stops being finite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite value in loss term '{term}': {value!r}")
        self.term = term
        self.value = value


def as_tensor(x, shape: tuple[int, ...] | None = None) -> Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def check_finite(term: str, value: float) -> float:
    if not np.isfinite(value):
        raise NonFiniteError(term, float(value))
    return float(value)


# ---------------------------------------------------------------------------
# Parameter containers


class ParamSet(Mapping[str, Tensor]):
    """Named tensors iterated in lexicographic name order.

    The flattened vector concatenates entries in that order, so
    ``unflatten(flatten())`` is a lossless round trip.
    """

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._data: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> Tensor:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._data))

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {self._data[k].shape}" for k in self)
        return f"ParamSet({shapes})"

    @property
    def size(self) -> int:
        return sum(v.size for v in self._data.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._data.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._data.items()})

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet({k: v for k, v in self._data.items() if k.startswith(prefix)})

    def merged(self, other: Mapping[str, Tensor]) -> "ParamSet":
        out = dict(self._data)
        out.update(other)
        return ParamSet(out)

    def flatten(self) -> Tensor:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([self._data[k].ravel() for k in self])

    def unflatten(self, vector: Tensor) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeError(f"flat vector has shape {vector.shape}, expected ({self.size},)")
        out, offset = {}, 0
        for k in self:
            shape = self._data[k].shape
            n = self._data[k].size
            out[k] = vector[offset:offset + n].reshape(shape).copy()
            offset += n
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )


def add_scaled(params: ParamSet, direction: Mapping[str, Tensor], scale: float) -> ParamSet:
    return ParamSet({k: params[k] + scale * direction[k] for k in params})


# ---------------------------------------------------------------------------
# Randomness


def seeded_rng(seed: int) -> Rng:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def gaussian(rng: Rng, shape) -> Tensor:
    return rng.standard_normal(shape)


def uniform_indices(rng: Rng, n: int, k: int, with_replacement: bool) -> np.ndarray:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if not with_replacement and k > n:
        raise ValueError(f"cannot draw {k} distinct indices from {n}")
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if with_replacement:
        return rng.integers(0, n, size=k)
    return rng.permutation(n)[:k]


# ---------------------------------------------------------------------------
# Primitives


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    return np.exp(log_softmax(logits))


def logmeanexp(values: Tensor) -> float:
    """log(mean(exp(values))) with a max shift."""
    top = float(np.max(values))
    return top + float(np.log(np.mean(np.exp(values - top))))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> tuple[float, Tensor]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(b), labels]))
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def squared_error(outputs: Tensor, targets: Tensor) -> tuple[float, Tensor]:
    """Half squared error summed over outputs, averaged over the batch."""
    b = outputs.shape[0]
    diff = outputs - targets
    return 0.5 * float(np.sum(diff * diff)) / b, diff / b


def argmax_lowest(scores: Tensor) -> np.ndarray:
    # np.argmax returns the first maximum, which is the lowest index on ties
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# Multilayer perceptron


@dataclass(frozen=True)
class Mlp:
    """Fully connected ReLU network with a linear output layer.

    ``widths`` runs from input to output width. Parameters live in a shared
    ParamSet under ``{prefix}.{layer}.weight`` / ``{prefix}.{layer}.bias``.
    """

    widths: tuple[int, ...]
    prefix: str

    def __post_init__(self):
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"invalid MLP widths {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def names(self, layer: int) -> tuple[str, str]:
        return f"{self.prefix}.{layer}.weight", f"{self.prefix}.{layer}.bias"

    def init(self, rng: Rng) -> dict[str, Tensor]:
        """He-normal weights, zero biases."""
        params = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            w_name, b_name = self.names(i)
            params[w_name] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            params[b_name] = np.zeros(fan_out)
        return params

    def zeros(self) -> dict[str, Tensor]:
        params = {}
        for i in range(self.n_layers):
            w_name, b_name = self.names(i)
            params[w_name] = np.zeros((self.widths[i], self.widths[i + 1]))
            params[b_name] = np.zeros(self.widths[i + 1])
        return params

    def forward(self, params: Mapping[str, Tensor], x: Tensor) -> tuple[Tensor, list[Tensor]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.prefix}: expected input (batch, {self.n_in}), got {x.shape}")
        cache = [x]
        h = x
        for i in range(self.n_layers):
            w_name, b_name = self.names(i)
            # einsum keeps each output row independent of the batch size
            # (BLAS switches kernels for a single row and differs in the last bit)
            h = np.einsum("ij,jk->ik", h, params[w_name]) + params[b_name]
            if i < self.n_layers - 1:
                h = relu(h)
            cache.append(h)
        return h, cache

    def __call__(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        return self.forward(params, x)[0]

    def backward(
        self, params: Mapping[str, Tensor], cache: list[Tensor], dout: Tensor
    ) -> tuple[dict[str, Tensor], Tensor]:
        """Gradients for this network's parameters and for its input."""
        grads = {}
        delta = dout
        for i in reversed(range(self.n_layers)):
            w_name, b_name = self.names(i)
            if i < self.n_layers - 1:
                delta = delta * (cache[i + 1] > 0)
            grads[w_name] = cache[i].T @ delta
            grads[b_name] = delta.sum(axis=0)
            delta = delta @ params[w_name].T
        return grads, delta


LOSSES: dict[str, Callable[[Tensor, np.ndarray], tuple[float, Tensor]]] = {
    "cross_entropy": softmax_cross_entropy,
    "squared": squared_error,
}


def forward_backward(
    net: Mlp, params: ParamSet, inputs: Tensor, targets, loss: str = "cross_entropy"
) -> tuple[float, ParamSet]:
    """Loss value and parameter gradients of ``net`` under a registered loss."""
    try:
        loss_fn = LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; registered: {sorted(LOSSES)}") from None
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != net.n_in:
        raise ShapeError(f"inputs must be (batch, {net.n_in}), got {inputs.shape}")
    if len(targets) != inputs.shape[0]:
        raise ShapeError(f"{len(targets)} targets for a batch of {inputs.shape[0]}")
    out, cache = net.forward(params, inputs)
    if loss == "squared":
        targets = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    value, dout = loss_fn(out, targets)
    check_finite(loss, value)
    grads, _ = net.backward(params, cache, dout)
    return value, params.zeros_like().merged(grads)


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps round-off on
    near-zero entries from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    objective: Callable[[ParamSet], tuple[float, ParamSet]],
    params: ParamSet,
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on every entry.

    ``objective`` maps a ParamSet to ``(loss, grads)`` and must be
    deterministic (fix any sampling noise before passing it in).
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"h must lie in (0, 1e-2], got {h}")
    _, grads = objective(params)
    worst = (0.0, "", ())
    for name in params:
        base = params[name]
        for idx in np.ndindex(base.shape):
            bumped = {k: params[k] for k in params}
            plus = base.copy()
            plus[idx] += h
            bumped[name] = plus
            f_plus, _ = objective(ParamSet(bumped))
            minus = base.copy()
            minus[idx] -= h
            bumped[name] = minus
            f_minus, _ = objective(ParamSet(bumped))
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = relative_error(float(grads[name][idx]), numeric)
            if err > worst[0] or not worst[1]:
                worst = (err, name, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], tol)


# ---------------------------------------------------------------------------
# Optimizers


class Sgd:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, Tensor] | None = None

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        if self.momentum == 0.0:
            return ParamSet({k: params[k] - self.lr * grads[k] for k in params})
        if self._velocity is None:
            self._velocity = {k: np.zeros_like(params[k]) for k in params}
        out = {}
        for k in params:
            self._velocity[k] = self.momentum * self._velocity[k] + grads[k]
            out[k] = params[k] - self.lr * self._velocity[k]
        return ParamSet(out)


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self._m: dict[str, Tensor] = {}
        self._v: dict[str, Tensor] = {}

    def step(self, params: ParamSet, grads: Mapping[str, Tensor]) -> ParamSet:
        self.t += 1
        out = {}
        for k in params:
            g = grads[k]
            m = self.b1 * self._m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self._v.get(k, 0.0) + (1 - self.b2) * g * g
            self._m[k], self._v[k] = m, v
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            out[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return ParamSet(out)
