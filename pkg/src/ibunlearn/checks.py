"""Finite-difference checks of the three hand-written gradients: the IB
loss, the DV bound and the forgetting loss, on small random models."""
from __future__ import annotations

import numpy as np

from .mine import build_statnet, dv_gradients, pairs
from .numerics import GradCheckReport, ParamSet, finite_difference_check, seeded_rng
from .unlearn import ForgetBatch, forget_loss
from .vib import build_model, ib_loss_with_noise

CHECKS = ("ib_loss", "dv_loss", "forget_loss")


def _jitter(params: ParamSet, rng) -> ParamSet:
    # moves zero-initialized biases off the ReLU kink
    return ParamSet({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()})


def _small_model(rng, beta: float):
    model = build_model(5, 3, 2, beta, rng, compressor_hidden=(4,), approximator_hidden=(4,))
    return model.with_params(_jitter(model.params, rng))


def check_ib_loss(seed: int, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    rng = seeded_rng(seed)
    model = _small_model(rng, beta=float(rng.uniform(0.01, 1.0)))
    x = rng.uniform(0.0, 1.0, (6, 5))
    y = rng.integers(0, 3, 6)
    eps = rng.standard_normal((6, 2))

    def objective(p: ParamSet):
        out = ib_loss_with_noise(model.with_params(p), x, y, eps)
        return out.total, out.grads

    return finite_difference_check(objective, model.params, h, tol)


def check_dv_loss(seed: int, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    rng = seeded_rng(seed)
    statnet = build_statnet(4, rng, hidden=(5, 5))
    statnet = statnet.with_params(_jitter(statnet.params, rng))
    a = rng.standard_normal((8, 2))
    b = rng.standard_normal((8, 2))
    joint, marginal = pairs(a, b), pairs(a, b[rng.permutation(8)])

    def objective(p: ParamSet):
        g = dv_gradients(statnet.with_params(p), joint, marginal)
        return g.value, g.params

    return finite_difference_check(objective, statnet.params, h, tol)


def check_forget_loss(seed: int, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    rng = seeded_rng(seed)
    model = _small_model(rng, beta=1e-3)
    statnet = build_statnet(4, rng, hidden=(5,))
    statnet = statnet.with_params(_jitter(statnet.params, rng))
    forget = ForgetBatch(rng.standard_normal((6, 2)), rng.integers(0, 3, 6))
    x_a = rng.uniform(0.0, 1.0, (6, 5))
    perm = rng.permutation(6)
    lam = float(rng.uniform(0.1, 0.9))

    def objective(p: ParamSet):
        out = forget_loss(model.with_params(p), statnet, forget, x_a, lam, perm)
        return out.value, out.grads

    return finite_difference_check(objective, model.params, h, tol)


RUNNERS = {"ib_loss": check_ib_loss, "dv_loss": check_dv_loss, "forget_loss": check_forget_loss}


def run_checks(seeds, h: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, int, GradCheckReport]]:
    return [(name, int(s), RUNNERS[name](int(s), h, tol)) for name in CHECKS for s in seeds]


def summary(results) -> dict[str, float]:
    """Worst relative error per check."""
    out: dict[str, float] = {}
    for name, _, rep in results:
        out[name] = max(out.get(name, 0.0), rep.max_rel_error)
    return out


def all_passed(results) -> bool:
    return bool(np.all([rep.passed for _, _, rep in results]))
