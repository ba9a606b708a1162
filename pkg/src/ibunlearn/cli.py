"""Command line: ``ibunlearn <command> [--config PATH] [--seed N] [--out PATH] ...``.

train             train on the configured data; writes model, compressor,
                  loss trace and the data splits into the --out directory
export-compressor copy the compressor half of a model file
prepare-request   client side: mask, compress and package an erase CSV
unlearn           server side: unlearn a model from a request file
retrain-baseline  retrain from scratch on a remaining-data CSV
evaluate          metrics CSV for one or more models
dp-account        print epsilon,delta for (n, sr, strategy)
gradcheck         finite-difference checks of the hand-written gradients
sweep             privacy metrics over the (beta, sr) grid
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checks, evalkit, pipeline, protocol
from .data import Dataset, read_csv, write_csv
from .masking import STRATEGIES, MaskSpec, account
from .pipeline import Config

log = logging.getLogger("ibunlearn")

SPLITS = ("remaining", "erase", "aux", "test", "triggered")


def _config(args) -> Config:
    cfg = pipeline.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values({"seed": args.seed})
    return cfg


def _rows_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        protocol.atomic_write(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _require_out(args) -> Path:
    if not args.out:
        raise ValueError(f"{args.command} needs --out")
    return Path(args.out)


def _dataset(path, n_classes: int) -> Dataset:
    return read_csv(path, n_classes)


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    exp = pipeline.prepare_experiment(cfg)
    model, trace = pipeline.train_original(cfg, exp.train)
    protocol.save_model(model, out / "model.bldu")
    protocol.export_compressor(model, out / "compressor.bldu", cfg["seed"])
    rows = [(i + 1, repr(v)) for i, v in enumerate(trace.epoch_loss)]
    protocol.atomic_write(out / "train_trace.csv", _rows_csv(("epoch", "loss"), rows).encode())
    target = exp.backdoor.target_label if exp.backdoor else 0
    splits = {
        "remaining": exp.partition.remaining,
        "erase": exp.erased,
        "aux": exp.partition.auxiliary,
        "test": exp.test,
        "triggered": Dataset(exp.triggered, np.full(len(exp.erased), target), exp.erased.n_classes),
    }
    for name, ds in splits.items():
        write_csv(ds, out / f"{name}.csv")
    protocol.atomic_write(out / "config.txt", cfg.to_text().encode())
    print(f"trained model written to {out}")
    return 0


def cmd_export_compressor(args) -> int:
    cfg = _config(args)
    model = protocol.load_model(args.model)
    ckpt = protocol.export_compressor(model, _require_out(args), cfg["seed"])
    print(f"checkpoint_hash={ckpt.hash}")
    return 0


def cmd_prepare_request(args) -> int:
    cfg = _config(args)
    ckpt = protocol.load_checkpoint(args.compressor)
    erased = read_csv(args.erase_csv)
    req = pipeline.client_request(cfg, ckpt, erased.inputs, erased.labels)
    protocol.save_request(req, _require_out(args))
    sys.stdout.write(_rows_csv(("epsilon", "delta"), [(repr(req.dp.epsilon), repr(req.dp.delta))]))
    return 0


def cmd_unlearn(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    model = protocol.load_model(args.model)
    req = protocol.load_request(args.request)
    verdict = protocol.validate_for_model(req, model)
    if not verdict:
        raise ValueError(f"request rejected: {verdict.reason}")
    aux = _dataset(args.aux_csv, model.n_classes)
    unlearned, trace = pipeline.server_unlearn(cfg, model, req, aux)
    protocol.save_model(unlearned, out)
    trace_path = args.trace or str(out) + ".trace.csv"
    protocol.atomic_write(trace_path, trace.to_csv().encode())
    print(f"unlearned model written to {out}")
    return 0


def cmd_retrain_baseline(args) -> int:
    cfg = _config(args)
    template = protocol.load_model(args.model)
    remaining = _dataset(args.remaining_csv, template.n_classes)
    model = pipeline.retrain(cfg, template, remaining)
    protocol.save_model(model, _require_out(args))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data)
    original = protocol.load_model(args.original)
    models = {"original": original}
    for item in args.models:
        name, sep, path = item.partition("=")
        if not sep or not name or name in models:
            raise ValueError(f"models are given as distinct name=path pairs, got {item!r}")
        models[name] = protocol.load_model(path)
    c = original.n_classes
    splits = {name: _dataset(data_dir / f"{name}.csv", c) for name in SPLITS}
    req = protocol.load_request(args.request)
    probes = evalkit.Probes(
        test=splits["test"],
        erased=splits["erase"],
        triggered=splits["triggered"].inputs,
        target_label=cfg["backdoor.target"],
        nonmembers=splits["test"],
        attacker=splits["remaining"],
        z_e=req.z_e,
        masked_erased=pipeline.masked_erased_inputs(cfg, splits["erase"].inputs),
        mask=pipeline.mask_spec(cfg, original.n_features),
    )
    reports = pipeline.evaluate(cfg, models, original, probes)
    _emit(evalkit.report_csv(reports), args.out)
    return 0


def cmd_dp_account(args) -> int:
    acc = account(MaskSpec(args.n, args.sr, args.strategy))
    _emit(_rows_csv(("epsilon", "delta"), [(repr(acc.epsilon), repr(acc.delta))]), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    seeds = range(cfg["seed"], cfg["seed"] + args.seeds)
    results = checks.run_checks(seeds, args.h, args.tol)
    rows = [(name, s, repr(rep.max_rel_error), rep.worst_param, "pass" if rep.passed else "fail")
            for name, s, rep in results]
    _emit(_rows_csv(("check", "seed", "max_rel_error", "worst_param", "status"), rows), args.out)
    return 0 if checks.all_passed(results) else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _emit(pipeline.sweep_csv(pipeline.privacy_sweep(cfg)), args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ibunlearn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the original model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-compressor", parents=[common], help="extract the compressor checkpoint")
    p.add_argument("model")
    p.set_defaults(func=cmd_export_compressor)

    p = sub.add_parser("prepare-request", parents=[common], help="client: build an unlearning request")
    p.add_argument("compressor")
    p.add_argument("erase_csv")
    p.set_defaults(func=cmd_prepare_request)

    p = sub.add_parser("unlearn", parents=[common], help="server: unlearn from a request")
    p.add_argument("model")
    p.add_argument("request")
    p.add_argument("aux_csv")
    p.add_argument("--trace", help="trace CSV path (default: OUT.trace.csv)")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("retrain-baseline", parents=[common], help="retrain on remaining data")
    p.add_argument("model", help="model file whose architecture is reused")
    p.add_argument("remaining_csv")
    p.set_defaults(func=cmd_retrain_baseline)

    p = sub.add_parser("evaluate", parents=[common], help="metrics CSV")
    p.add_argument("original")
    p.add_argument("models", nargs="*", help="name=path")
    p.add_argument("--data", required=True, help="directory written by train")
    p.add_argument("--request", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dp-account", parents=[common], help="(epsilon, delta) of a mask spec")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--sr", type=float, required=True)
    p.add_argument("--strategy", choices=STRATEGIES, default=STRATEGIES[0])
    p.set_defaults(func=cmd_dp_account)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", parents=[common], help="privacy metrics over beta and sr")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every error contract ends in a nonzero exit
        if args.verbose:
            log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
