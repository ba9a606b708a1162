"""Noise-free feature masking by random sampling, with its (epsilon, delta)
accounting.

A sample with ``n`` features reveals ``k = round(sr * n)`` sampled features
and replaces the rest with ``mask_value``:

* with replacement:    epsilon = k ln((n+1)/n),        delta = 1 - ((n-1)/n)^k
* without replacement: epsilon = ln((n+1)/(n+1-k)),    delta = k/n
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, round_half_up
from .numerics import Rng, ShapeError, uniform_indices

WITH = "with_replacement"
WITHOUT = "without_replacement"
STRATEGIES = (WITH, WITHOUT)


@dataclass(frozen=True)
class MaskSpec:
    n: int
    sr: float
    strategy: str = WITH
    mask_value: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.sr <= 1.0:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.sr}")
        if not 0.0 <= self.mask_value <= 1.0:
            raise ValueError("mask value must lie in [0, 1]")
        if self.k < 1:
            raise ValueError(f"sr={self.sr} samples no features out of {self.n}")
        if self.strategy == WITHOUT and self.k > self.n:
            raise ValueError("k exceeds n for sampling without replacement")

    @property
    def k(self) -> int:
        return round_half_up(self.sr * self.n)


@dataclass(frozen=True)
class DpAccount:
    epsilon: float
    delta: float
    n: int
    k: int
    strategy: str


def epsilon_delta(n: int, k: int, strategy: str) -> tuple[float, float]:
    """Closed-form (epsilon, delta) for ``k`` draws over ``n`` features."""
    if strategy == WITH:
        return k * math.log((n + 1) / n), 1.0 - ((n - 1) / n) ** k
    if strategy == WITHOUT:
        if k > n:
            raise ValueError(f"k={k} exceeds n={n} for sampling without replacement")
        return math.log((n + 1) / (n + 1 - k)), k / n
    raise ValueError(f"unknown sampling strategy {strategy!r}")


def account(spec: MaskSpec) -> DpAccount:
    eps, delta = epsilon_delta(spec.n, spec.k, spec.strategy)
    return DpAccount(eps, delta, spec.n, spec.k, spec.strategy)


@dataclass(frozen=True)
class MaskedSample:
    values: np.ndarray
    sampled_indices: np.ndarray  # sorted, distinct


def draw_indices(spec: MaskSpec, rng: Rng) -> np.ndarray:
    # repeated with-replacement draws reveal a feature once
    draws = uniform_indices(rng, spec.n, spec.k, spec.strategy == WITH)
    return np.unique(draws)


def mask(sample, spec: MaskSpec, rng: Rng) -> MaskedSample:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != (spec.n,):
        raise ShapeError(f"sample must have {spec.n} features, got shape {sample.shape}")
    idx = draw_indices(spec, rng)
    values = np.full(spec.n, spec.mask_value, dtype=np.float64)
    values[idx] = sample[idx]
    return MaskedSample(values, idx)


def mask_batch(batch, spec: MaskSpec, rng: Rng) -> list[MaskedSample]:
    """Mask every row with independent draws from one sequential stream."""
    inputs = batch.inputs if isinstance(batch, Dataset) else np.asarray(batch, dtype=np.float64)
    if inputs.ndim != 2:
        raise ShapeError(f"batch must be 2-d, got shape {inputs.shape}")
    return [mask(row, spec, rng) for row in inputs]


def masked_inputs(batch, spec: MaskSpec, rng: Rng) -> np.ndarray:
    return np.stack([m.values for m in mask_batch(batch, spec, rng)])
