"""Command-line front end.

Verbs: train, mult gen|info|import, quantize, sweep, transfer, quantstudy,
report. Every experiment verb takes --config plus targeted overrides.
Exit codes: 0 success, 2 config/usage error, 3 accuracy threshold unmet,
4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import data as dat
from . import harness, luts, modelio, quant
from .attacks import AttackError
from .config import AttackTemplate, ConfigError, HarnessConfig, parse_config
from .data import DataError
from .harness import HarnessError, ThresholdError
from .luts import LutError
from .model import build_preset
from .modelio import ModelFormatError
from .quant import QuantError
from .train import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_THRESHOLD = 3
EXIT_IO = 4


def preset_input_shape(preset: str, dataset: str) -> tuple[int, int, int]:
    """lenet5 needs 32x32 inputs; the other presets take the canonical shape."""
    c, h, w = dat.CANONICAL_SHAPES[dataset]
    if preset == "lenet5":
        return (c, 32, 32)
    return (c, h, w)


def _apply_overrides(cfg: HarnessConfig, args) -> HarnessConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", None, "seed must fit an unsigned 64-bit int")
        updates["seed"] = args.seed
    if getattr(args, "eps", None):
        try:
            eps = [float(tok) for tok in args.eps.split(",") if tok.strip()]
        except ValueError:
            raise ConfigError("--eps", None, f"cannot parse {args.eps!r}") from None
        if not eps or eps[0] != 0.0 or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("--eps", None, "override must start at 0 and ascend")
        updates["eps_list"] = eps
    if getattr(args, "attack", None):
        templates = []
        for tok in args.attack:
            kind, _, norm = tok.partition(":")
            try:
                templates.append(AttackTemplate(kind.lower(), norm.lower()))
            except Exception:
                raise ConfigError("--attack", None, f"bad attack token {tok!r}; "
                                  f"use kind:norm") from None
            from .attacks import VALID_ATTACKS
            if (kind.lower(), norm.lower()) not in VALID_ATTACKS:
                raise ConfigError("--attack", None, f"unsupported attack {tok!r}")
        updates["attacks"] = templates
    if getattr(args, "mult", None):
        mults = list(args.mult)
        if mults[0] != "exact":
            mults = ["exact"] + [m for m in mults if m != "exact"]
        updates["multipliers"] = mults
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train_epochs=args.epochs)
    shape = preset_input_shape(cfg.model, cfg.dataset)
    spec = build_preset(cfg.model, shape)
    train_ds = dat.adapt_dataset(harness.load_split(cfg, "train"), shape)
    if cfg.train_subset:
        train_ds = train_ds.subset(min(cfg.train_subset, train_ds.n))
    tc = TrainConfig(epochs=cfg.train_epochs, batch_size=cfg.train_batch_size,
                     lr=cfg.train_lr, momentum=cfg.train_momentum, seed=cfg.seed)
    result = train(spec, train_ds.images, train_ds.labels, tc, log=True)
    test_ds = dat.adapt_dataset(harness.load_split(cfg, "test"), shape)
    acc = evaluate(result.model, test_ds.images, test_ds.labels)
    out = args.out or cfg.model_path
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    modelio.save_model(result.model, out)
    print(f"test accuracy {acc:.2f}%; model written to {out}")
    return EXIT_OK


def cmd_mult_gen(args) -> int:
    lut = luts.generate(args.family, args.width, k=args.k, name=args.name)
    luts.save_lut(lut, args.out)
    m = lut.error_metrics()
    print(f"{lut.name}: {args.width}-bit, mae {m.mae_pct:.4f}%, wrote {args.out}")
    return EXIT_OK


def cmd_mult_info(args) -> int:
    lut = luts.from_spec(args.spec, args.width)
    m = lut.error_metrics()
    print(f"name: {lut.name}")
    print(f"bit_width: {lut.bit_width}")
    print(f"exact: {lut.is_exact}")
    print(f"mae_pct: {m.mae_pct:.6f}")
    print(f"error_rate_pct: {m.error_rate_pct:.6f}")
    print(f"worst_case_error: {m.worst_case_error}")
    return EXIT_OK


def cmd_mult_import(args) -> int:
    lut = luts.import_lut_csv(args.csv, name=args.name)
    luts.save_lut(lut, args.out)
    print(f"imported {lut.name} ({lut.bit_width}-bit) from {args.csv} to {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    model = harness.load_float_model(cfg.model_path)
    train_ds = dat.adapt_dataset(harness.load_split(cfg, "train"), model.input_shape)
    calib = train_ds.subset(min(cfg.calib_size, train_ds.n))
    qparams = quant.calibrate(model, calib.images, qlevel=cfg.qlevel)
    qm = quant.quantize(model, qparams)
    mult = args.mult[0] if args.mult else "exact"
    lut = luts.from_spec(mult, cfg.qlevel)
    qm = quant.route_multipliers(qm, {c: lut for c in qm.spec.conv_layer_names})
    out = args.out or os.path.splitext(cfg.model_path)[0] + f".q{cfg.qlevel}.axm"
    modelio.save_quantized(qm, out)
    print(f"quantized model ({mult} routing) written to {out}")
    return EXIT_OK


def _emit(report, out: str, fmt: str | None) -> None:
    fmt = fmt or ("jsonl" if out.endswith(".jsonl") else "csv")
    harness.emit_report(report, out, fmt)
    print(f"{len(report.entries)} grid rows written to {out}")


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    report = harness.robustness_sweep(cfg)
    _emit(report, args.out, args.format)
    return EXIT_OK


def cmd_quantstudy(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    if args.mult:
        extra = [m for m in args.mult if m not in cfg.multipliers]
        cfg = dataclasses.replace(cfg, multipliers=cfg.multipliers + extra,
                                  study_multiplier=args.mult[-1])
    report = harness.quantization_study(cfg)
    _emit(report, args.out, args.format)
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.eps:
        try:
            cfg = dataclasses.replace(cfg, transfer_epsilon=float(args.eps))
        except ValueError:
            raise ConfigError("--eps", None, f"cannot parse {args.eps!r}") from None
    entries = harness.transferability_matrix(cfg)
    harness.emit_transfer_csv(entries, args.out)
    for e in sorted(entries, key=lambda e: (e.source, e.victim)):
        print(f"{e.source} -> {e.victim}: {e.before_pct:.0f}/{e.after_pct:.0f}")
    print(f"{len(entries)} transfer pairs written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.input.endswith(".jsonl"):
        entries = harness.read_report_jsonl(args.input).entries
    else:
        entries = harness.read_report_csv(args.input)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "report.csv")
    harness.emit_report(harness.RobustnessReport({}, {}, entries), csv_path, "csv")
    written = harness.emit_plot_data(entries, args.out_dir)
    print(f"wrote {csv_path} and {len(written)} .dat files to {args.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="axdnn",
        description="Robustness of quantized CNNs under approximate-multiplier "
                    "arithmetic, emulated with exhaustive LUTs.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("train", help="train a float baseline model")
    add_common(p, out_required=False)
    p.add_argument("--epochs", type=int, default=None)

    mult = sub.add_parser("mult", help="generate, inspect, or import multiplier LUTs")
    msub = mult.add_subparsers(dest="mult_verb", required=True)
    g = msub.add_parser("gen", help="generate a LUT from a family")
    g.add_argument("--family", required=True,
                   choices=["exact", "operand_trunc", "pp_trunc", "mitchell_log"])
    g.add_argument("--k", type=int, default=None, help="truncation parameter")
    g.add_argument("--width", type=int, default=8)
    g.add_argument("--name", default=None)
    g.add_argument("--out", required=True)
    i = msub.add_parser("info", help="print LUT metrics")
    i.add_argument("spec", help="generator spec or .axm1/.csv path")
    i.add_argument("--width", type=int, default=8)
    imp = msub.add_parser("import", help="import an exhaustive a,b,product CSV")
    imp.add_argument("csv")
    imp.add_argument("--out", required=True)
    imp.add_argument("--name", default=None)

    p = sub.add_parser("quantize", help="quantize a trained model")
    add_common(p, out_required=False)
    p.add_argument("--mult", action="append", default=None,
                   help="multiplier routed into all conv layers")

    for verb, fn_help in (("sweep", "run the (attack x eps x multiplier) grid"),
                          ("quantstudy", "float vs quantized-exact vs "
                                         "quantized-approximate curves")):
        p = sub.add_parser(verb, help=fn_help)
        add_common(p)
        p.add_argument("--eps", default=None, help="comma-separated override")
        p.add_argument("--attack", action="append", default=None,
                       help="kind:norm, repeatable")
        p.add_argument("--mult", action="append", default=None)
        p.add_argument("--format", choices=["csv", "jsonl"], default=None)

    p = sub.add_parser("transfer", help="before/after transferability matrix")
    add_common(p)
    p.add_argument("--eps", default=None, help="linf bim budget override")

    p = sub.add_parser("report", help="re-emit a report as CSV plus .dat files")
    p.add_argument("--input", required=True, help="report .jsonl or .csv")
    p.add_argument("--out-dir", required=True)
    return parser


_HANDLERS = {
    "train": cmd_train,
    "quantize": cmd_quantize,
    "sweep": cmd_sweep,
    "quantstudy": cmd_quantstudy,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.verb == "mult":
            handler = {"gen": cmd_mult_gen, "info": cmd_mult_info,
                       "import": cmd_mult_import}[args.mult_verb]
            return handler(args)
        return _HANDLERS[args.verb](args)
    except ThresholdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    except (ConfigError, HarnessError, AttackError, QuantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError, ModelFormatError, LutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
