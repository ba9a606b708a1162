"""Server-side unlearning from compressed representations.

The server holds the trained model, an auxiliary dataset and a ForgetBatch of
client-side codes ``z_e`` with labels ``y_e``. Each step balances

* retaining: the IB loss on auxiliary data, and
* forgetting: ``lam * DV(z_e; z_a) + (1 - lam) * mean log p(y_e | z_e)``

with the min-norm (MGDA) convex combination of their gradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .mine import (
    DEFAULT_EMA_DECAY,
    DEFAULT_HIDDEN,
    DvTrainer,
    StatNet,
    StatNetDivergence,
    build_statnet,
    mi_loss_for_unlearning,
)
from .numerics import (
    NonFiniteError,
    ParamSet,
    Rng,
    Sgd,
    ShapeError,
    Tensor,
    check_finite,
    log_softmax,
    seeded_rng,
    softmax,
)
from .vib import DIVERGENCE_LIMIT as VIB_DIVERGENCE_LIMIT
from .vib import (
    DivergenceError,
    VibModel,
    build_model,
    code_backward,
    encode,
    ib_loss,
    iterate_minibatches,
    train,
)

log = logging.getLogger(__name__)

TRACE_HEADER = ("epoch", "retain_loss", "forget_loss", "alpha", "dv_estimate", "label_term")
FORGET_STREAM_TAG = 0x5F0A6E7D
STATNET_STREAM_TAG = 0x57A7E7


@dataclass(frozen=True)
class ForgetBatch:
    """Compressed erased representations and their labels; no raw inputs."""

    z_e: np.ndarray
    y_e: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z_e, dtype=np.float64)
        y = np.asarray(self.y_e, dtype=np.int64)
        if z.ndim != 2 or z.shape[0] == 0:
            raise ShapeError(f"z_e must be a nonempty (m, d) array, got {z.shape}")
        if y.shape != (z.shape[0],):
            raise ShapeError(f"{y.shape} labels for {z.shape[0]} codes")
        object.__setattr__(self, "z_e", z)
        object.__setattr__(self, "y_e", y)

    def __len__(self) -> int:
        return self.z_e.shape[0]

    def check_model(self, model: VibModel) -> None:
        if self.z_e.shape[1] != model.latent_dim:
            raise ShapeError(f"codes have width {self.z_e.shape[1]}, model latent_dim is {model.latent_dim}")
        if self.y_e.min() < 0 or self.y_e.max() >= model.n_classes:
            raise ValueError(f"labels must lie in [0, {model.n_classes})")


# ---------------------------------------------------------------------------
# MGDA


@dataclass(frozen=True)
class MgdaWeights:
    alpha: float
    g_retain_norm: float
    g_forget_norm: float
    degenerate: bool


def mgda_alpha(g_retain: Tensor, g_forget: Tensor, degeneracy_tol: float = 1e-12) -> MgdaWeights:
    """Minimizer over alpha in [0, 1] of ||alpha*g_retain + (1-alpha)*g_forget||^2."""
    g1 = np.asarray(g_retain, dtype=np.float64).ravel()
    g2 = np.asarray(g_forget, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ShapeError(f"gradient lengths differ: {g1.size} vs {g2.size}")
    diff = g1 - g2
    gap = float(np.dot(diff, diff))
    n1, n2 = float(np.linalg.norm(g1)), float(np.linalg.norm(g2))
    if math.sqrt(gap) < degeneracy_tol:
        return MgdaWeights(0.5, n1, n2, True)
    alpha = float(np.dot(g2 - g1, g2)) / gap
    return MgdaWeights(min(max(alpha, 0.0), 1.0), n1, n2, False)


def combine(alpha: float, g_retain: ParamSet, g_forget: ParamSet) -> ParamSet:
    return ParamSet({k: alpha * g_retain[k] + (1.0 - alpha) * g_forget[k] for k in g_retain})


# ---------------------------------------------------------------------------
# Losses


@dataclass
class ForgetLoss:
    value: float
    dv_term: float
    label_term: float
    grads: ParamSet
    label_clamped: bool


def label_floor(n_classes: int) -> float:
    return math.log(1.0 / n_classes) - 2.0


def forget_loss(
    model: VibModel,
    statnet: StatNet,
    forget: ForgetBatch,
    aux_inputs: Tensor,
    lam: float,
    perm: Optional[np.ndarray] = None,
) -> ForgetLoss:
    """Forgetting objective on a forget batch and an equally sized auxiliary
    batch. ``perm`` shuffles auxiliary codes to form DV marginals (identity
    reversal by default)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    aux_inputs = np.asarray(aux_inputs, dtype=np.float64)
    if aux_inputs.shape[0] != len(forget):
        raise ShapeError(f"auxiliary batch of {aux_inputs.shape[0]} rows for {len(forget)} codes")
    forget.check_model(model)
    m = len(forget)
    if perm is None:
        perm = np.arange(m)[::-1].copy()
    grads = model.params.zeros_like()

    # compressor side: DV(z_e; z_a), gradient through the auxiliary mean code
    code = encode(model, aux_inputs)
    dv, _, d_za = mi_loss_for_unlearning(statnet, forget.z_e, code.mean, perm)
    if lam > 0.0:
        c_grads = code_backward(model, code, lam * d_za, np.zeros_like(code.log_var))
        grads = grads.merged(c_grads)

    # approximator side: mean log-likelihood of y_e given z_e, each sample
    # clamped below at log(1/C) - 2 (no gradient once clamped)
    logits, cache = model.approximator.forward(model.params, forget.z_e)
    logp = log_softmax(logits)
    rows = np.arange(m)
    floor = label_floor(model.n_classes)
    per_sample = logp[rows, forget.y_e]
    active = per_sample > floor
    label_term = float(np.mean(np.where(active, per_sample, floor)))
    if lam < 1.0 and active.any():
        dlogits = -softmax(logits)
        dlogits[rows, forget.y_e] += 1.0
        dlogits *= active[:, None]
        a_grads, _ = model.approximator.backward(model.params, cache, (1.0 - lam) * dlogits / m)
        grads = grads.merged(a_grads)
    clamped = not active.any()
    value = check_finite("forget_loss", lam * dv + (1.0 - lam) * label_term)
    return ForgetLoss(value, dv, label_term, grads, clamped)


def retain_loss(model: VibModel, aux_inputs: Tensor, aux_labels, rng: Rng):
    """IB loss on auxiliary data (same computation and rng use as training)."""
    return ib_loss(model, aux_inputs, aux_labels, rng)


# ---------------------------------------------------------------------------
# Unlearning loop


@dataclass
class UnlearnConfig:
    epochs: int = 100
    batch_size: int = 20
    lr: float = 0.2
    momentum: float = 0.9
    lam: float = 0.5
    statnet_hidden: tuple[int, ...] = DEFAULT_HIDDEN
    statnet_lr: float = 1e-3
    inner_steps: int = 5
    warmup_steps: int = 200
    ema_decay: float = DEFAULT_EMA_DECAY
    degeneracy_tol: float = 1e-12
    force_alpha: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid epochs / batch_size / lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.force_alpha is not None and not 0.0 <= self.force_alpha <= 1.0:
            raise ValueError("force_alpha must lie in [0, 1]")
        if self.inner_steps < 0 or self.warmup_steps < 0:
            raise ValueError("statnet step counts must be >= 0")


@dataclass
class UnlearnTrace:
    rows: list[tuple] = field(default_factory=list)  # one per epoch, TRACE_HEADER order
    step_retain_loss: list[float] = field(default_factory=list)
    step_alpha: list[float] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        i = TRACE_HEADER.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        lines = [",".join(TRACE_HEADER)]
        for r in self.rows:
            lines.append(",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]))
        return "\n".join(lines) + "\n"


class UnlearnDivergence(DivergenceError):
    """Raised when unlearning diverges; ``last_good`` holds the parameters
    at the end of the last completed epoch."""

    def __init__(self, message: str, last_good: ParamSet):
        super().__init__(message)
        self.last_good = last_good


def _forget_rows(n_forget: int, size: int, rng: Rng) -> np.ndarray:
    # a minibatch of codes drawn without replacement (with, if size exceeds the set)
    return rng.choice(n_forget, size=size, replace=size > n_forget)


def unlearn(
    model: VibModel, forget: ForgetBatch, aux: Dataset, config: UnlearnConfig
) -> tuple[VibModel, UnlearnTrace]:
    """Jointly update compressor and approximator with MGDA-balanced
    retaining and forgetting gradients.

    Each step draws an auxiliary minibatch (the retain batch) and an equally
    sized minibatch of forget codes; row i of one is paired with row i of the
    other for the DV term. Retain batches use ``seeded_rng(config.seed)``
    exactly as ``vib.train`` does; forget batches and the statistics network
    use separate derived streams.
    """
    if not isinstance(forget, ForgetBatch):
        raise TypeError("unlearn accepts only a ForgetBatch of compressed codes")
    forget.check_model(model)
    if aux.n_features != model.n_features:
        raise ShapeError("auxiliary data does not match the model's input width")
    trace = UnlearnTrace()
    if config.epochs == 0:
        return model, trace

    rng = seeded_rng(config.seed)
    frng = seeded_rng(config.seed ^ FORGET_STREAM_TAG)
    statnet = build_statnet(
        2 * model.latent_dim, seeded_rng(config.seed ^ STATNET_STREAM_TAG), config.statnet_hidden
    )
    trainer = DvTrainer(statnet, config.statnet_lr, config.ema_decay)

    def refresh_statnet(current: VibModel, steps: int) -> None:
        for _ in range(steps):
            rows = _forget_rows(len(aux), config.batch_size, frng)
            z_a = encode(current, aux.inputs[rows]).mean
            z_e = forget.z_e[_forget_rows(len(forget), len(rows), frng)]
            trainer.step(z_e, z_a, frng)

    params = model.params
    last_good = params
    refresh_statnet(model, config.warmup_steps)
    opt = Sgd(config.lr, config.momentum)
    for epoch in range(config.epochs):
        stats = []
        try:
            for rows in iterate_minibatches(len(aux), config.batch_size, rng):
                current = model.with_params(params)
                ret = retain_loss(current, aux.inputs[rows], aux.labels[rows], rng)
                refresh_statnet(current, config.inner_steps)
                picked = _forget_rows(len(forget), len(rows), frng)
                fb = ForgetBatch(forget.z_e[picked], forget.y_e[picked])
                fl = forget_loss(
                    current, trainer.statnet, fb, aux.inputs[rows], config.lam, frng.permutation(len(rows))
                )
                if config.force_alpha is None:
                    alpha = mgda_alpha(ret.grads.flatten(), fl.grads.flatten(), config.degeneracy_tol).alpha
                else:
                    alpha = config.force_alpha
                if ret.total > VIB_DIVERGENCE_LIMIT:
                    raise DivergenceError(f"retain loss {ret.total:.3g} exceeded {VIB_DIVERGENCE_LIMIT:g}")
                params = opt.step(params, combine(alpha, ret.grads, fl.grads))
                stats.append((ret.total, fl.value, alpha, fl.dv_term, fl.label_term))
                trace.step_retain_loss.append(ret.total)
                trace.step_alpha.append(alpha)
        except (DivergenceError, NonFiniteError, StatNetDivergence) as exc:
            raise UnlearnDivergence(
                f"unlearning diverged in epoch {epoch + 1} ({exc}); try a lower learning rate",
                last_good,
            ) from exc
        last_good = params
        means = np.mean(np.array(stats), axis=0)
        trace.rows.append((epoch + 1, *map(float, means)))
        log.debug("unlearn epoch %d: %s", epoch + 1, trace.rows[-1])
    return model.with_params(params), trace


def retrain_baseline(
    template: VibModel,
    remaining: Dataset,
    epochs: int,
    batch_size: int,
    lr: float,
    seed: int,
    momentum: float = 0.9,
) -> VibModel:
    """Fresh initialization of ``template``'s architecture trained on the
    remaining data only."""
    if len(remaining) == 0:
        raise ValueError("remaining dataset is empty")
    rng = seeded_rng(seed)
    fresh = build_model(
        template.n_features,
        template.n_classes,
        template.latent_dim,
        template.beta,
        rng,
        template.compressor.widths[1:-1],
        template.approximator.widths[1:-1],
    )
    trained, _ = train(fresh, remaining, epochs, batch_size, lr, rng, momentum)
    return trained
