"""Evaluation: accuracies, mutual-information probes, the dual-privacy
descriptor and two simplified attacks (code-to-input reconstruction and
confidence-gap membership inference)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .data import Dataset
from .masking import MaskSpec, masked_inputs
from .mine import build_statnet, estimate_mi, train_statnet
from .numerics import Adam, Mlp, ParamSet, Rng, ShapeError, forward_backward, softmax, softmax_cross_entropy
from .vib import VibModel, encode, kl_to_standard_normal, predict, predict_logits
from .vib import iterate_minibatches

REPORT_HEADER = (
    "model", "test_acc", "backdoor_acc", "erased_acc", "dv_mi",
    "kl_upper", "ce_lower", "phi", "recon_mse", "mia_auc",
)


class Metric(NamedTuple):
    value: float
    n: int  # evaluation-set size


def _nonempty(x, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError(f"{what} is empty")
    return x


def accuracy(model: VibModel, ds: Dataset) -> Metric:
    return Metric(float(np.mean(predict(model, ds.inputs) == ds.labels)), len(ds))


def backdoor_accuracy(model: VibModel, triggered, target_label: int) -> Metric:
    """Fraction of triggered samples predicted as ``target_label``."""
    triggered = _nonempty(np.asarray(triggered, dtype=np.float64), "triggered set")
    return Metric(float(np.mean(predict(model, triggered) == target_label)), triggered.shape[0])


@dataclass(frozen=True)
class DualPrivacy:
    kl_upper: float  # surrogate upper bound on I(Z;X)
    ce_lower: float  # surrogate lower bound on I(Z;Y)
    phi: float
    n: int


def dual_privacy_descriptor(model: VibModel, probe: Dataset) -> DualPrivacy:
    """KL term, ``max(0, ln C - CE)`` and their floored difference, in nats.

    Cross-entropy is taken at the mean code so the descriptor is
    deterministic.
    """
    missing = set(range(model.n_classes)) - set(np.unique(probe.labels).tolist())
    if missing:
        raise ValueError(f"probe set lacks classes {sorted(missing)}")
    kl = kl_to_standard_normal(encode(model, probe.inputs))
    ce, _ = softmax_cross_entropy(predict_logits(model, probe.inputs), probe.labels)
    ce_lower = max(0.0, math.log(model.n_classes) - ce)
    return DualPrivacy(kl, ce_lower, max(0.0, kl - ce_lower), len(probe))


def reconstruction_attack(
    z_train,
    x_train,
    z_eval,
    x_eval,
    rng: Rng,
    hidden: tuple[int, ...] = (64,),
    epochs: int = 200,
    lr: float = 1e-2,
    batch_size: int = 32,
) -> Metric:
    """Train a decoder MLP z -> x on attacker pairs; return the per-sample
    summed squared error on the evaluation pairs, averaged over samples."""
    z_train = _nonempty(np.asarray(z_train, dtype=np.float64), "attacker training set")
    x_train = np.asarray(x_train, dtype=np.float64)
    z_eval = _nonempty(np.asarray(z_eval, dtype=np.float64), "evaluation set")
    x_eval = np.asarray(x_eval, dtype=np.float64)
    if z_train.shape[0] != x_train.shape[0] or z_eval.shape[0] != x_eval.shape[0]:
        raise ShapeError("codes and inputs must have the same number of rows")
    if z_train.shape[1] != z_eval.shape[1] or x_train.shape[1] != x_eval.shape[1]:
        raise ShapeError("training and evaluation widths differ")
    net = Mlp((z_train.shape[1], *hidden, x_train.shape[1]), "decoder")
    params = ParamSet(net.init(rng))
    opt = Adam(lr)
    for _ in range(epochs):
        for rows in iterate_minibatches(z_train.shape[0], batch_size, rng):
            _, grads = forward_backward(net, params, z_train[rows], x_train[rows], "squared")
            params = opt.step(params, grads)
    err = net(params, z_eval) - x_eval
    return Metric(float(np.mean(np.sum(err * err, axis=1))), z_eval.shape[0])


def rank_auc(positive, negative) -> float:
    """Probability a positive score beats a negative one, ties counted half."""
    pos = _nonempty(np.asarray(positive, dtype=np.float64), "positive set")
    neg = _nonempty(np.asarray(negative, dtype=np.float64), "negative set")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def _true_label_confidence(model: VibModel, ds: Dataset) -> np.ndarray:
    probs = softmax(predict_logits(model, ds.inputs))
    return probs[np.arange(len(ds)), ds.labels]


def mia_auc(original: VibModel, unlearned: VibModel, erased: Dataset, nonmembers: Dataset) -> Metric:
    """AUC of the confidence drop (original minus unlearned, true label)
    separating erased samples from non-members."""
    pos = _true_label_confidence(original, erased) - _true_label_confidence(unlearned, erased)
    neg = _true_label_confidence(original, nonmembers) - _true_label_confidence(unlearned, nonmembers)
    return Metric(rank_auc(pos, neg), len(erased) + len(nonmembers))


def dv_probe(z, x, rng: Rng, steps: int = 500, lr: float = 1e-3) -> Metric:
    """DV estimate between codes and the inputs they were computed from.

    Used as the upload-leakage probe between ``Z_e`` and the masked erased
    inputs; the statistics network is trained and evaluated on the same
    rows, so this is an in-sample figure.
    """
    z = _nonempty(np.asarray(z, dtype=np.float64), "code set")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != z.shape[0]:
        raise ShapeError("codes and inputs must have the same number of rows")
    net = build_statnet(z.shape[1] + x.shape[1], rng)

    def sampler(r: Rng, size: int):
        rows = r.choice(z.shape[0], size=size, replace=size > z.shape[0])
        return z[rows], x[rows]

    net, _ = train_statnet(net, sampler, steps, lr, rng, batch_size=min(256, z.shape[0]))
    return Metric(estimate_mi(net, z, x, rng), z.shape[0])


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class MetricsReport:
    test_accuracy: Metric
    backdoor_accuracy: Metric
    erased_accuracy: Metric
    dv_mi_ZeZa: Metric
    kl_upper_IZX: Metric
    ce_lower_IZY: Metric
    phi_descriptor: Metric
    recon_mse: Metric
    mia_auc: Metric

    def __post_init__(self):
        for name in ("test_accuracy", "backdoor_accuracy", "erased_accuracy", "mia_auc"):
            v = getattr(self, name).value
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.recon_mse.value < 0:
            raise ValueError("recon_mse must be nonnegative")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name).value for f in fields(self))


@dataclass(frozen=True)
class Probes:
    """Everything the report needs besides the models.

    ``erased`` is the erased set as it was trained on, ``triggered`` the
    erased inputs with the backdoor trigger stamped, ``z_e`` the uploaded
    codes and ``masked_erased`` the masked inputs they came from.
    """

    test: Dataset
    erased: Dataset
    triggered: np.ndarray
    target_label: int
    nonmembers: Dataset
    attacker: Dataset  # raw inputs whose codes train the reconstruction attacker
    z_e: np.ndarray
    masked_erased: np.ndarray
    mask: MaskSpec


def model_report(
    model: VibModel, original: VibModel, probes: Probes, rng: Rng, dv_mi: Metric, attack_epochs: int = 200
) -> MetricsReport:
    desc = dual_privacy_descriptor(model, probes.test)
    z_train = encode(model, masked_inputs(probes.attacker.inputs, probes.mask, rng)).mean
    z_eval = encode(model, probes.masked_erased).mean
    recon = reconstruction_attack(
        z_train, probes.attacker.inputs, z_eval, probes.erased.inputs, rng, epochs=attack_epochs
    )
    n = desc.n
    return MetricsReport(
        test_accuracy=accuracy(model, probes.test),
        backdoor_accuracy=backdoor_accuracy(model, probes.triggered, probes.target_label),
        erased_accuracy=accuracy(model, probes.erased),
        dv_mi_ZeZa=dv_mi,
        kl_upper_IZX=Metric(desc.kl_upper, n),
        ce_lower_IZY=Metric(desc.ce_lower, n),
        phi_descriptor=Metric(desc.phi, n),
        recon_mse=recon,
        mia_auc=mia_auc(original, model, probes.erased, probes.nonmembers),
    )


def full_report(
    models: dict[str, VibModel],
    original: VibModel,
    probes: Probes,
    rng: Rng,
    attack_epochs: int = 200,
    dv_steps: int = 500,
) -> dict[str, MetricsReport]:
    """One report per named model. ``dv_mi`` is the upload-leakage probe
    between the uploaded codes and the masked erased inputs, shared by all
    rows."""
    dv_mi = dv_probe(probes.z_e, probes.masked_erased, rng, dv_steps)
    return {name: model_report(m, original, probes, rng, dv_mi, attack_epochs) for name, m in models.items()}


def report_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for name, rep in reports.items():
        writer.writerow([name, *(repr(float(v)) for v in rep.values())])
    return buf.getvalue()


def read_report_csv(text: str) -> dict[str, tuple[float, ...]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError("report CSV header mismatch")
    return {r[0]: tuple(float(v) for v in r[1:]) for r in rows[1:] if r}
