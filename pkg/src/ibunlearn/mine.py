"""Neural mutual-information estimation with the Donsker-Varadhan bound.

    I(A; B) >= E_joint[T] - log E_marginal[exp T]

A statistics network T scores concatenated pairs (a, b). Marginal pairs are
built by shuffling the ``b`` half within a batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .numerics import Adam, Mlp, ParamSet, Rng, ShapeError, Tensor, check_finite, logmeanexp

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)
DEFAULT_EMA_DECAY = 0.99
DIVERGENCE_LIMIT = 50.0


class StatNetDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class StatNet:
    net: Mlp
    params: ParamSet

    @property
    def n_in(self) -> int:
        return self.net.n_in

    def with_params(self, params: ParamSet) -> "StatNet":
        return replace(self, params=params)

    def scores(self, pairs: Tensor) -> Tensor:
        return self.net(self.params, pairs)[:, 0]


def build_statnet(n_in: int, rng: Rng, hidden: tuple[int, ...] = DEFAULT_HIDDEN) -> StatNet:
    net = Mlp((n_in, *hidden, 1), "statnet")
    return StatNet(net, ParamSet(net.init(rng)))


def constant_statnet(n_in: int, value: float, hidden: tuple[int, ...] = DEFAULT_HIDDEN) -> StatNet:
    """T(a, b) = value everywhere (all weights zero, output bias = value)."""
    net = Mlp((n_in, *hidden, 1), "statnet")
    params = net.zeros()
    params[net.names(net.n_layers - 1)[1]] = np.array([float(value)])
    return StatNet(net, ParamSet(params))


def pairs(a: Tensor, b: Tensor) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot pair arrays of shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def _check_batches(statnet: StatNet, joint: Tensor, marginal: Tensor) -> None:
    for name, batch in (("joint", joint), ("marginal", marginal)):
        if batch.ndim != 2 or batch.shape[0] == 0:
            raise ValueError(f"{name} batch must be a nonempty 2-d array")
        if batch.shape[1] != statnet.n_in:
            raise ShapeError(f"{name} pairs have width {batch.shape[1]}, statnet expects {statnet.n_in}")


def dv_estimate(statnet: StatNet, joint: Tensor, marginal: Tensor) -> float:
    joint = np.asarray(joint, dtype=np.float64)
    marginal = np.asarray(marginal, dtype=np.float64)
    _check_batches(statnet, joint, marginal)
    t_joint = statnet.scores(joint)
    t_marg = statnet.scores(marginal)
    return float(np.mean(t_joint)) - logmeanexp(t_marg)


@dataclass
class DvGradients:
    value: float
    params: ParamSet
    d_joint: Tensor
    d_marginal: Tensor
    batch_denominator: float  # mean exp(T) over the marginal batch


def dv_gradients(
    statnet: StatNet, joint: Tensor, marginal: Tensor, denominator: Optional[float] = None
) -> DvGradients:
    """DV value and its gradients w.r.t. statnet params and both pair batches.

    With ``denominator=None`` the gradient is exact. Otherwise the
    log-denominator's gradient uses ``grad(mean exp T) / denominator``
    (moving-average bias correction).
    """
    joint = np.asarray(joint, dtype=np.float64)
    marginal = np.asarray(marginal, dtype=np.float64)
    _check_batches(statnet, joint, marginal)
    out_j, cache_j = statnet.net.forward(statnet.params, joint)
    out_m, cache_m = statnet.net.forward(statnet.params, marginal)
    t_j, t_m = out_j[:, 0], out_m[:, 0]
    value = check_finite("dv_estimate", float(np.mean(t_j)) - logmeanexp(t_m))
    with np.errstate(over="ignore"):  # diagnostic only; inf is an honest report
        batch_denominator = float(np.mean(np.exp(t_m)))

    d_tj = np.full_like(t_j, 1.0 / len(t_j))
    if denominator is None:
        shifted = np.exp(t_m - t_m.max())
        d_tm = -shifted / shifted.sum()
    else:
        d_tm = -np.exp(t_m) / (len(t_m) * denominator)
    g_j, dx_j = statnet.net.backward(statnet.params, cache_j, d_tj[:, None])
    g_m, dx_m = statnet.net.backward(statnet.params, cache_m, d_tm[:, None])
    grads = ParamSet({k: g_j[k] + g_m[k] for k in g_j})
    return DvGradients(value, grads, dx_j, dx_m, batch_denominator)


@dataclass
class DvTrainer:
    """Gradient ascent on the DV bound with an EMA-corrected denominator.

    The EMA starts at the first batch's mean exp(T).
    """

    statnet: StatNet
    lr: float = 1e-3
    ema_decay: float = DEFAULT_EMA_DECAY
    ema_denominator: Optional[float] = None
    _opt: Adam = field(init=False, repr=False)

    def __post_init__(self):
        self._opt = Adam(self.lr)

    def step(self, a: Tensor, b: Tensor, rng: Rng) -> float:
        perm = rng.permutation(len(b))
        joint = pairs(a, b)
        marginal = pairs(a, np.asarray(b)[perm])
        t_m = self.statnet.scores(marginal)
        if np.mean(np.abs(t_m)) > DIVERGENCE_LIMIT:
            raise StatNetDivergence(f"statnet outputs average |T| > {DIVERGENCE_LIMIT}")
        batch_den = float(np.mean(np.exp(t_m)))
        if self.ema_denominator is None:
            self.ema_denominator = batch_den
        else:
            self.ema_denominator = self.ema_decay * self.ema_denominator + (1 - self.ema_decay) * batch_den
        g = dv_gradients(self.statnet, joint, marginal, self.ema_denominator)
        # ascent: step along the negated gradient of -DV
        neg = ParamSet({k: -v for k, v in g.params.items()})
        self.statnet = self.statnet.with_params(self._opt.step(self.statnet.params, neg))
        return g.value


def train_statnet(
    statnet: StatNet,
    sampler: Callable[[Rng, int], tuple[Tensor, Tensor]],
    steps: int,
    lr: float,
    rng: Rng,
    batch_size: int = 256,
    ema_decay: float = DEFAULT_EMA_DECAY,
) -> tuple[StatNet, list[float]]:
    """Train ``statnet`` on joint draws ``sampler(rng, batch_size) -> (a, b)``.

    Returns the trained net and the per-step minibatch DV estimates.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    trainer = DvTrainer(statnet, lr, ema_decay)
    trace = []
    for _ in range(steps):
        a, b = sampler(rng, batch_size)
        trace.append(trainer.step(a, b, rng))
    return trainer.statnet, trace


def estimate_mi(statnet: StatNet, a: Tensor, b: Tensor, rng: Rng) -> float:
    """DV estimate on a held batch with a shuffled-marginal counterpart."""
    perm = rng.permutation(len(b))
    return dv_estimate(statnet, pairs(a, b), pairs(a, np.asarray(b)[perm]))


def mi_loss_for_unlearning(
    statnet: StatNet, z_e: Tensor, z_a: Tensor, perm: np.ndarray
) -> tuple[float, Tensor, Tensor]:
    """DV estimate between paired rows of ``z_e`` and ``z_a`` and its exact
    gradients w.r.t. both; ``perm`` shuffles ``z_a`` to form marginals."""
    z_e = np.asarray(z_e, dtype=np.float64)
    z_a = np.asarray(z_a, dtype=np.float64)
    d = z_e.shape[1]
    joint = pairs(z_e, z_a)
    marginal = pairs(z_e, z_a[perm])
    g = dv_gradients(statnet, joint, marginal)
    d_ze = g.d_joint[:, :d] + g.d_marginal[:, :d]
    d_za = g.d_joint[:, d:].copy()
    # marginal row i used z_a[perm[i]]
    np.add.at(d_za, perm, g.d_marginal[:, d:])
    return g.value, d_ze, d_za


def correlated_gaussians(rho: float, dim: int = 1) -> Callable[[Rng, int], tuple[Tensor, Tensor]]:
    """Sampler of (a, b) with unit variances and per-coordinate correlation rho.

    Analytic MI is ``-dim/2 * ln(1 - rho^2)`` nats.
    """
    scale = np.sqrt(1.0 - rho * rho)

    def sample(rng: Rng, batch: int) -> tuple[Tensor, Tensor]:
        a = rng.standard_normal((batch, dim))
        b = rho * a + scale * rng.standard_normal((batch, dim))
        return a, b

    return sample


def gaussian_mi(rho: float, dim: int = 1) -> float:
    return -0.5 * dim * float(np.log(1.0 - rho * rho))
