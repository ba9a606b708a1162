"""Experiment configuration and the seeded stages shared by the command line
and the end-to-end checks: data, training, client request, unlearning,
retraining and evaluation.

Configs are flat ``section.key=value`` text; unknown keys and out-of-range
values are rejected at load. Every randomized stage draws from
``seeded_rng(seed ^ stage_tag(name))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import numpy as np

from . import data as data_mod
from .data import BackdoorSpec, Dataset, Partition
from .evalkit import REPORT_HEADER, MetricsReport, Probes, full_report
from .masking import STRATEGIES, MaskSpec, masked_inputs
from .numerics import Rng, seeded_rng
from .protocol import MODES, CompressorCheckpoint, UnlearningRequest, compressor_checkpoint, fnv1a64, prepare_request
from .unlearn import ForgetBatch, UnlearnConfig, UnlearnTrace, retrain_baseline, unlearn
from .vib import TrainTrace, VibModel, build_model, train


class ConfigError(ValueError):
    pass


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit_open(v) -> bool:
    return 0.0 < v < 1.0


def _unit(v) -> bool:
    return 0.0 <= v <= 1.0


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",")) if text.strip() else ()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(","))


def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, check, description)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any, Optional[Callable[[Any], bool]], str]] = {
    "seed": (int, 0, _nonneg, "master seed"),
    "dataset.kind": (str, "blobs", lambda v: v in ("blobs", "idx", "csv"), "blobs | idx | csv"),
    "dataset.classes": (int, 4, lambda v: v >= 2, "blob classes"),
    "dataset.per_class": (int, 250, _positive, "blob rows per class"),
    "dataset.dim": (int, 16, lambda v: v >= 4, "blob feature count"),
    "dataset.spread": (float, 0.05, _nonneg, "blob standard deviation"),
    "dataset.images": (str, "", None, "IDX image file"),
    "dataset.labels": (str, "", None, "IDX label file"),
    "dataset.csv": (str, "", None, "CSV file (f0..f{n-1},label)"),
    "dataset.limit": (int, 0, _nonneg, "keep only the first rows (0 = all)"),
    "dataset.test_fraction": (float, 0.2, _unit_open, "held-out test share"),
    "dataset.edr": (float, 0.06, lambda v: 0.0 < v < 0.5, "erased share of the training rows"),
    "dataset.aux_source": (str, "held-out", lambda v: v in ("held-out", "random-inputs"), "auxiliary data"),
    "backdoor.enabled": (_bool, True, None, "poison the erased rows"),
    "backdoor.features": (int, 4, _positive, "trigger width (first features)"),
    "backdoor.value": (float, 1.0, _unit, "trigger feature value"),
    "backdoor.target": (int, 0, _nonneg, "attack target label"),
    "model.latent_dim": (int, 8, _positive, "code width d"),
    "model.beta": (float, 1e-3, _nonneg, "IB trade-off"),
    "model.compressor_hidden": (_ints, (64,), lambda v: all(w > 0 for w in v), "hidden widths"),
    "model.approximator_hidden": (_ints, (32,), lambda v: all(w > 0 for w in v), "hidden widths"),
    "train.epochs": (int, 30, _nonneg, ""),
    "train.batch_size": (int, 20, _positive, ""),
    "train.lr": (float, 0.02, _positive, ""),
    "train.momentum": (float, 0.9, lambda v: 0.0 <= v < 1.0, ""),
    "mask.sr": (float, 0.6, lambda v: 0.0 < v <= 1.0, "sampling rate"),
    "mask.strategy": (str, "with_replacement", lambda v: v in STRATEGIES, ""),
    "mask.mask_value": (float, 0.0, _unit, "value of unsampled features"),
    "mask.mode": (str, "mean-code", lambda v: v in MODES, "client compression mode"),
    "unlearn.epochs": (int, 200, _nonneg, ""),
    "unlearn.batch_size": (int, 20, _positive, ""),
    "unlearn.lr": (float, 0.1, _positive, ""),
    "unlearn.momentum": (float, 0.9, lambda v: 0.0 <= v < 1.0, ""),
    "unlearn.lam": (float, 0.5, _unit, "DV / label split of the forgetting loss"),
    "unlearn.statnet_hidden": (_ints, (64, 64), lambda v: len(v) > 0 and all(w > 0 for w in v), ""),
    "unlearn.statnet_lr": (float, 1e-3, _positive, ""),
    "unlearn.inner_steps": (int, 5, _nonneg, "statnet steps per unlearning step"),
    "unlearn.warmup_steps": (int, 200, _nonneg, "statnet steps before unlearning"),
    "eval.attack_epochs": (int, 200, _positive, "reconstruction decoder epochs"),
    "eval.dv_steps": (int, 500, _nonneg, "statnet steps of the upload probe"),
    "sweep.betas": (_floats, (1e-4, 1e-2, 1.0), lambda v: all(b >= 0 for b in v), ""),
    "sweep.srs": (_floats, (0.2, 0.6, 1.0), lambda v: all(0 < s <= 1 for s in v), ""),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config(Mapping[str, Any]):
    """Validated flat configuration; every key in ``SCHEMA`` is present."""

    def __init__(self, overrides: Optional[Mapping[str, Any]] = None):
        values = {k: spec[1] for k, spec in SCHEMA.items()}
        for key, value in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            parser, _, check, _ = SCHEMA[key]
            if isinstance(value, str):
                try:
                    value = parser(value.strip())
                except ValueError:
                    raise ConfigError(f"cannot parse {key}={value!r}") from None
            if check is not None and not check(value):
                raise ConfigError(f"value out of range: {key}={value!r}")
            values[key] = value
        self._values = values

    def __getitem__(self, key: str):
        return self._values[key]

    def __iter__(self):
        return iter(SCHEMA)

    def __len__(self) -> int:
        return len(SCHEMA)

    def with_values(self, updates: Mapping[str, Any]) -> "Config":
        return Config({**self._values, **updates})

    def to_text(self) -> str:
        return "".join(f"{k}={_format(self[k])}\n" for k in SCHEMA)


def parse_config(text: str) -> Config:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return Config(overrides)


def load_config(path: Optional[str | Path]) -> Config:
    return Config() if path is None else parse_config(Path(path).read_text())


def stage_tag(name: str) -> int:
    return fnv1a64(name.encode("utf-8"))


def stage_rng(cfg: Config, name: str) -> Rng:
    return seeded_rng(cfg["seed"] ^ stage_tag(name))


def stage_seed(cfg: Config, name: str) -> int:
    # 63-bit integer seed for components that take ints
    return (cfg["seed"] ^ stage_tag(name)) & 0x7FFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Stages


@dataclass(frozen=True)
class Experiment:
    """Data side of one run."""

    partition: Partition  # clean rows
    train: Dataset  # what the original model trains on (erased rows poisoned)
    erased: Dataset  # erased rows as trained on
    triggered: np.ndarray  # erased inputs with the trigger stamped
    backdoor: Optional[BackdoorSpec]

    @property
    def test(self) -> Dataset:
        return self.partition.test


def load_dataset(cfg: Config) -> Dataset:
    kind = cfg["dataset.kind"]
    if kind == "blobs":
        ds = data_mod.synth_blobs(
            stage_rng(cfg, "data"), cfg["dataset.classes"], cfg["dataset.per_class"],
            cfg["dataset.dim"], cfg["dataset.spread"],
        )
    elif kind == "idx":
        if not cfg["dataset.images"] or not cfg["dataset.labels"]:
            raise ConfigError("dataset.kind=idx needs dataset.images and dataset.labels")
        ds = data_mod.load_idx(cfg["dataset.images"], cfg["dataset.labels"])
    else:
        if not cfg["dataset.csv"]:
            raise ConfigError("dataset.kind=csv needs dataset.csv")
        ds = data_mod.read_csv(cfg["dataset.csv"])
    if cfg["dataset.limit"]:
        ds = ds.take(np.arange(min(cfg["dataset.limit"], len(ds))))
    return ds


def backdoor_spec(cfg: Config, n_features: int, n_classes: int) -> Optional[BackdoorSpec]:
    if not cfg["backdoor.enabled"]:
        return None
    spec = BackdoorSpec(tuple(range(cfg["backdoor.features"])), cfg["backdoor.value"], cfg["backdoor.target"])
    spec.validate(n_features, n_classes)
    return spec


def prepare_experiment(cfg: Config) -> Experiment:
    ds = load_dataset(cfg)
    rng = stage_rng(cfg, "partition")
    train_set, test = data_mod.train_test_split(ds, cfg["dataset.test_fraction"], rng)
    spec = backdoor_spec(cfg, ds.n_features, ds.n_classes)
    exclude = [spec.target_label] if spec else []
    part = data_mod.partition(train_set, cfg["dataset.edr"], cfg["dataset.aux_source"], rng, test, exclude)
    if spec is None:
        return Experiment(part, train_set, part.erased, part.erased.inputs, None)
    poisoned = data_mod.inject_backdoor(train_set, spec, part.erased_rows)
    erased = poisoned.take(part.erased_rows)
    triggered = data_mod.stamp_trigger(part.erased.inputs, spec)
    return Experiment(part, poisoned, erased, triggered, spec)


def fresh_model(cfg: Config, n_features: int, n_classes: int, beta: Optional[float] = None) -> VibModel:
    return build_model(
        n_features, n_classes, cfg["model.latent_dim"],
        cfg["model.beta"] if beta is None else beta, stage_rng(cfg, "init"),
        cfg["model.compressor_hidden"], cfg["model.approximator_hidden"],
    )


def train_original(cfg: Config, dataset: Dataset, beta: Optional[float] = None) -> tuple[VibModel, TrainTrace]:
    model = fresh_model(cfg, dataset.n_features, dataset.n_classes, beta)
    return train(
        model, dataset, cfg["train.epochs"], cfg["train.batch_size"], cfg["train.lr"],
        stage_rng(cfg, "train"), cfg["train.momentum"],
    )


def mask_spec(cfg: Config, n_features: int, sr: Optional[float] = None) -> MaskSpec:
    return MaskSpec(n_features, cfg["mask.sr"] if sr is None else sr, cfg["mask.strategy"], cfg["mask.mask_value"])


def client_request(
    cfg: Config, ckpt: CompressorCheckpoint, x_e, y_e, sr: Optional[float] = None
) -> UnlearningRequest:
    return prepare_request(
        ckpt, x_e, y_e, mask_spec(cfg, ckpt.n_features, sr), stage_rng(cfg, "mask"), cfg["mask.mode"]
    )


def masked_erased_inputs(cfg: Config, x_e, sr: Optional[float] = None) -> np.ndarray:
    """The masked inputs ``client_request`` compresses (same rng stream)."""
    x_e = np.asarray(x_e, dtype=np.float64)
    return masked_inputs(x_e, mask_spec(cfg, x_e.shape[1], sr), stage_rng(cfg, "mask"))


def unlearn_config(cfg: Config) -> UnlearnConfig:
    return UnlearnConfig(
        epochs=cfg["unlearn.epochs"],
        batch_size=cfg["unlearn.batch_size"],
        lr=cfg["unlearn.lr"],
        momentum=cfg["unlearn.momentum"],
        lam=cfg["unlearn.lam"],
        statnet_hidden=cfg["unlearn.statnet_hidden"],
        statnet_lr=cfg["unlearn.statnet_lr"],
        inner_steps=cfg["unlearn.inner_steps"],
        warmup_steps=cfg["unlearn.warmup_steps"],
        seed=stage_seed(cfg, "unlearn"),
    )


def server_unlearn(
    cfg: Config, model: VibModel, request: UnlearningRequest, aux: Dataset
) -> tuple[VibModel, UnlearnTrace]:
    if not isinstance(request, UnlearningRequest):
        raise TypeError("the server accepts only an UnlearningRequest of compressed codes")
    return unlearn(model, ForgetBatch(request.z_e, request.y_e), aux, unlearn_config(cfg))


def retrain(cfg: Config, template: VibModel, remaining: Dataset) -> VibModel:
    return retrain_baseline(
        template, remaining, cfg["train.epochs"], cfg["train.batch_size"], cfg["train.lr"],
        stage_seed(cfg, "retrain"), cfg["train.momentum"],
    )


def probes(cfg: Config, exp: Experiment, request: UnlearningRequest, sr: Optional[float] = None) -> Probes:
    spec = exp.backdoor
    return Probes(
        test=exp.test,
        erased=exp.erased,
        triggered=exp.triggered,
        target_label=spec.target_label if spec else 0,
        nonmembers=exp.test,
        attacker=exp.partition.remaining,
        z_e=request.z_e,
        masked_erased=masked_erased_inputs(cfg, exp.erased.inputs, sr),
        mask=mask_spec(cfg, exp.erased.n_features, sr),
    )


def evaluate(
    cfg: Config, models: dict[str, VibModel], original: VibModel, probe_set: Probes
) -> dict[str, MetricsReport]:
    return full_report(
        models, original, probe_set, stage_rng(cfg, "evaluate"),
        attack_epochs=cfg["eval.attack_epochs"], dv_steps=cfg["eval.dv_steps"],
    )


@dataclass
class RunResult:
    experiment: Experiment
    original: VibModel
    request: UnlearningRequest
    unlearned: VibModel
    trace: UnlearnTrace
    retrained: VibModel


def run(cfg: Config) -> RunResult:
    """Train, request, unlearn and retrain with one config."""
    exp = prepare_experiment(cfg)
    original, _ = train_original(cfg, exp.train)
    ckpt = compressor_checkpoint(original, cfg["seed"])
    request = client_request(cfg, ckpt, exp.erased.inputs, exp.erased.labels)
    unlearned, trace = server_unlearn(cfg, original, request, exp.partition.auxiliary)
    retrained = retrain(cfg, original, exp.partition.remaining)
    return RunResult(exp, original, request, unlearned, trace, retrained)


@dataclass(frozen=True)
class SweepPoint:
    beta: float
    sr: float
    report: MetricsReport


def privacy_sweep(cfg: Config, betas=None, srs=None) -> list[SweepPoint]:
    """Privacy metrics of the trained model for each (beta, sr) pair; the
    data split and erased set are shared across the grid."""
    exp = prepare_experiment(cfg)
    betas = cfg["sweep.betas"] if betas is None else betas
    srs = cfg["sweep.srs"] if srs is None else srs
    points = []
    for beta in betas:
        model, _ = train_original(cfg, exp.train, beta)
        ckpt = compressor_checkpoint(model)
        for sr in srs:
            request = client_request(cfg, ckpt, exp.erased.inputs, exp.erased.labels, sr)
            rep = evaluate(cfg, {"original": model}, model, probes(cfg, exp, request, sr))["original"]
            points.append(SweepPoint(beta, sr, rep))
    return points


def sweep_csv(points: list[SweepPoint]) -> str:
    lines = [",".join(("beta", "sr") + REPORT_HEADER[1:])]
    for p in points:
        lines.append(",".join(repr(float(v)) for v in (p.beta, p.sr, *p.report.values())))
    return "\n".join(lines) + "\n"

