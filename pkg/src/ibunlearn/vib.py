"""Variational information bottleneck classifier.

A stochastic Gaussian compressor maps inputs to a diagonal Gaussian code
(mean, log-variance); an approximator maps a sampled code to class logits.
Training minimizes ``beta * KL(code || N(0, I)) + cross-entropy``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .numerics import (
    Mlp,
    ParamSet,
    Rng,
    Sgd,
    ShapeError,
    Tensor,
    argmax_lowest,
    check_finite,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

LOG_VAR_CLAMP = 10.0
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class VibModel:
    compressor: Mlp
    approximator: Mlp
    params: ParamSet
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.compressor.n_out % 2:
            raise ValueError("compressor output width must be 2 * latent_dim")
        if self.approximator.n_in != self.latent_dim:
            raise ValueError(
                f"approximator input {self.approximator.n_in} != latent_dim {self.latent_dim}"
            )

    @property
    def latent_dim(self) -> int:
        return self.compressor.n_out // 2

    @property
    def n_features(self) -> int:
        return self.compressor.n_in

    @property
    def n_classes(self) -> int:
        return self.approximator.n_out

    def with_params(self, params: ParamSet) -> "VibModel":
        return replace(self, params=params)


def build_model(
    n_features: int,
    n_classes: int,
    latent_dim: int,
    beta: float,
    rng: Optional[Rng] = None,
    compressor_hidden: tuple[int, ...] = (64,),
    approximator_hidden: tuple[int, ...] = (32,),
) -> VibModel:
    """Fresh model; ``rng=None`` gives all-zero parameters."""
    comp = Mlp((n_features, *compressor_hidden, 2 * latent_dim), "compressor")
    appr = Mlp((latent_dim, *approximator_hidden, n_classes), "approximator")
    if rng is None:
        params = {**comp.zeros(), **appr.zeros()}
    else:
        params = {**comp.init(rng), **appr.init(rng)}
    return VibModel(comp, appr, ParamSet(params), beta)


@dataclass
class GaussianCode:
    mean: Tensor
    log_var: Tensor
    # pre-clamp compressor output, kept for the backward pass
    raw_log_var: Tensor = field(default=None, repr=False)
    cache: list = field(default=None, repr=False)

    @property
    def std(self) -> Tensor:
        return np.exp(0.5 * self.log_var)


def encode_with(compressor: Mlp, params, inputs) -> GaussianCode:
    """Gaussian code from a bare compressor and its parameters."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != compressor.n_in:
        raise ShapeError(f"encode expects (batch, {compressor.n_in}), got {inputs.shape}")
    out, cache = compressor.forward(params, inputs)
    d = compressor.n_out // 2
    raw = out[:, d:]
    return GaussianCode(out[:, :d], np.clip(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP), raw, cache)


def encode(model: VibModel, inputs) -> GaussianCode:
    return encode_with(model.compressor, model.params, inputs)


def sample_code(code: GaussianCode, rng: Rng) -> tuple[Tensor, Tensor]:
    """Reparameterized draw z = mean + std * eps; returns (z, eps)."""
    eps = rng.standard_normal(code.mean.shape)
    return code.mean + code.std * eps, eps


def kl_to_standard_normal(code: GaussianCode) -> float:
    mu, lv = code.mean, code.log_var
    per_row = 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=1)
    return float(np.mean(per_row))


def code_backward(
    model: VibModel, code: GaussianCode, d_mean: Tensor, d_log_var: Tensor
) -> dict[str, Tensor]:
    """Push gradients w.r.t. (mean, clamped log_var) into compressor params."""
    inside = np.abs(code.raw_log_var) < LOG_VAR_CLAMP
    dout = np.concatenate([d_mean, d_log_var * inside], axis=1)
    grads, _ = model.compressor.backward(model.params, code.cache, dout)
    return grads


@dataclass
class IbLoss:
    total: float
    com_term: float
    app_term: float
    grads: ParamSet


def ib_loss_with_noise(model: VibModel, inputs, labels, eps: Tensor) -> IbLoss:
    """IB loss for fixed reparameterization noise (deterministic in eps)."""
    code = encode(model, inputs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (code.mean.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {code.mean.shape[0]} inputs")
    b = code.mean.shape[0]
    std = code.std
    z = code.mean + std * eps
    logits, a_cache = model.approximator.forward(model.params, z)
    app, dlogits = softmax_cross_entropy(logits, labels)
    com = kl_to_standard_normal(code)
    check_finite("app_term", app)
    check_finite("com_term", com)
    total = check_finite("total", model.beta * com + app)

    a_grads, dz = model.approximator.backward(model.params, a_cache, dlogits)
    d_mean = dz + model.beta * code.mean / b
    d_log_var = dz * eps * std * 0.5 + model.beta * 0.5 * (np.exp(code.log_var) - 1.0) / b
    c_grads = code_backward(model, code, d_mean, d_log_var)
    return IbLoss(total, com, app, ParamSet({**c_grads, **a_grads}))


def ib_loss(model: VibModel, inputs, labels, rng: Rng) -> IbLoss:
    """One reparameterized sample per example."""
    n_rows = np.asarray(inputs).shape[0]
    eps = rng.standard_normal((n_rows, model.latent_dim))
    return ib_loss_with_noise(model, inputs, labels, eps)


def predict_logits(model: VibModel, inputs, mode: str = "mean-code", rng: Optional[Rng] = None) -> Tensor:
    code = encode(model, inputs)
    if mode == "mean-code":
        z = code.mean
    elif mode == "sampled":
        if rng is None:
            raise ValueError("sampled prediction needs an rng")
        z, _ = sample_code(code, rng)
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    return model.approximator(model.params, z)


def predict(model: VibModel, inputs, mode: str = "mean-code", rng: Optional[Rng] = None) -> np.ndarray:
    return argmax_lowest(predict_logits(model, inputs, mode, rng))


def accuracy(model: VibModel, ds: Dataset) -> float:
    return float(np.mean(predict(model, ds.inputs) == ds.labels))


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)


def iterate_minibatches(n_rows: int, batch_size: int, rng: Rng):
    order = rng.permutation(n_rows)
    for start in range(0, n_rows, batch_size):
        yield order[start:start + batch_size]


def train(
    model: VibModel,
    dataset: Dataset,
    epochs: int,
    batch_size: int = 20,
    lr: float = 0.02,
    rng: Optional[Rng] = None,
    momentum: float = 0.9,
) -> tuple[VibModel, TrainTrace]:
    """Minibatch SGD on the IB loss. ``epochs=0`` returns the model as is."""
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if dataset.n_features != model.n_features:
        raise ShapeError(f"dataset has {dataset.n_features} features, model expects {model.n_features}")
    trace = TrainTrace()
    if epochs == 0:
        return model, trace
    if rng is None:
        raise ValueError("training needs an rng")
    opt = Sgd(lr, momentum)
    params = model.params
    for epoch in range(epochs):
        losses = []
        for rows in iterate_minibatches(len(dataset), batch_size, rng):
            out = ib_loss(model.with_params(params), dataset.inputs[rows], dataset.labels[rows], rng)
            if out.total > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"IB loss {out.total:.3g} exceeded {DIVERGENCE_LIMIT:g} in epoch {epoch}; try a lower learning rate"
                )
            params = opt.step(params, out.grads)
            losses.append(out.total)
            trace.step_loss.append(out.total)
        trace.epoch_loss.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.5f", epoch, trace.epoch_loss[-1])
    return model.with_params(params), trace
