"""Command-line pipeline: synthesis, fitting, training, and inference.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numeric
failure.  Every command writes only to the path(s) named by its output
flags; floats are printed with 9 significant digits, text outputs are
UTF-8 with LF line endings.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (Normalizer, PreparedData, load_cells, load_prepared,
                      prepare_data, save_prepared)
from .ecm import (ExtractOptions, extract_cycle_features, read_feature_table,
                  write_feature_table)
from .errors import (DataFormatError, DegenerateFitError, DomainError,
                     InputError, NumericError, PaceError, UsageError)
from .model import ModelConfig, build_model
from .report import read_importance_csv, write_importance_csv, write_report
from .stream import StreamStats, stream_infer
from .synthetic import FleetSpec, generate_fleet, write_fleet
from .train import (RunReport, TrainConfig, evaluate, permutation_importance,
                    run_ablation, run_training, train, write_history)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

FMT = "%.9g"


def parse_horizons(text: str) -> tuple:
    """``"1,30,50"`` or ``"1-50"`` (or a mix) -> strictly increasing ints."""
    values: list[int] = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part.lstrip("-"):
                lo, hi = part.split("-", 1)
                values.extend(range(int(lo), int(hi) + 1))
            else:
                values.append(int(part))
        except ValueError:
            raise UsageError(f"bad horizon spec {part!r} in {text!r}") from None
    if not values or any(b <= a for a, b in zip(values, values[1:])):
        raise UsageError(f"horizons must be strictly increasing: {text!r}")
    return tuple(values)


def load_run_config(path, args) -> tuple:
    """Model/train configs from an optional JSON file, flags winning."""
    model_dict, train_dict = {}, {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc}", path=str(path)) from exc
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise InputError(f"unknown config sections: {sorted(unknown)}")
        model_dict = dict(raw.get("model", {}))
        train_dict = dict(raw.get("train", {}))

    overrides = {
        "window": getattr(args, "window", None),
        "horizons": getattr(args, "horizons", None),
    }
    for key, value in overrides.items():
        if value is not None:
            model_dict[key] = value
    train_overrides = {
        "max_epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "patience": getattr(args, "patience", None),
    }
    for key, value in train_overrides.items():
        if value is not None:
            train_dict[key] = value
    if getattr(args, "seed", None) is not None:
        train_dict["seeds"] = [args.seed]
    if isinstance(model_dict.get("horizons"), str):
        model_dict["horizons"] = list(parse_horizons(model_dict["horizons"]))
    return ModelConfig.from_dict(model_dict), TrainConfig.from_dict(train_dict)


def fit_all_cells(cells: dict, segment: str = "discharge") -> list:
    options = ExtractOptions(segment=segment)
    rows = []
    for cell in cells.values():
        rows.extend(extract_cycle_features(cell.cycles, options))
    return rows


def build_prepared(args, window: int, horizons) -> PreparedData:
    """Windows from --prepared if given, else the manifest pipeline."""
    if getattr(args, "prepared", None) is not None:
        prepared = load_prepared(args.prepared)
        if prepared.window != window:
            raise InputError(
                f"prepared windows have length {prepared.window}, "
                f"config wants {window}")
        if tuple(prepared.horizons) != tuple(horizons):
            raise InputError("prepared horizons do not match config")
        return prepared
    if getattr(args, "manifest", None) is None:
        raise UsageError("need --manifest or --prepared")
    cells = load_cells(args.manifest)
    if getattr(args, "features", None) is not None:
        rows = read_feature_table(args.features)
    else:
        logger.info("no --features given; fitting circuit parameters now")
        rows = fit_all_cells(cells)
    return prepare_data(cells, rows, window, horizons)


def emit_lines(lines, out_path) -> None:
    if out_path is None:
        for line in lines:
            print(line)
    else:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def metrics_csv_lines(variant: str, metrics) -> list:
    """The per-horizon comparison layout, eta consistent with the text.

    eta is recomputed from the serialized rmse and params_k strings and
    printed at full round-trip precision, so a reader re-deriving
    1000/(rmse*params_k) from the CSV gets the stored value exactly.
    """
    params_k = FMT % (metrics.param_count / 1000.0)
    flops_m = FMT % (metrics.flops / 1e6)
    lines = ["variant,params_k,flops_m,h,rmse,mae,eta"]
    for h in metrics.horizons:
        rmse = FMT % metrics.rmse[h]
        mae = FMT % metrics.mae[h]
        eta = repr(1000.0 / (float(rmse) * float(params_k)))
        lines.append(f"{variant},{params_k},{flops_m},{h},{rmse},{mae},{eta}")
    return lines


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_synth(args) -> int:
    spec = FleetSpec(n_train=args.train, n_test=args.test,
                     cycles=args.cycles, seed=args.seed)
    manifest = write_fleet(generate_fleet(spec), args.out)
    print(manifest)
    return EXIT_OK


def cmd_fit_ecm(args) -> int:
    cells = load_cells(args.manifest)
    rows = fit_all_cells(cells, args.segment)
    write_feature_table(rows, args.out)
    print(f"fitted {len(rows)} cycles from {len(cells)} cells -> {args.out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    horizons = parse_horizons(args.horizons)
    cells = load_cells(args.manifest)
    if args.features is not None:
        rows = read_feature_table(args.features)
    else:
        rows = fit_all_cells(cells)
    prepared = prepare_data(cells, rows, args.window, horizons)
    save_prepared(prepared, args.out)
    print(f"{len(prepared.train)} train / {len(prepared.test)} test windows "
          f"(window {prepared.window}, {len(prepared.horizons)} horizons) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_config, train_config = load_run_config(args.config, args)
    prepared = build_prepared(args, model_config.window, model_config.horizons)
    if model_config.features != prepared.train.features.shape[2]:
        raise InputError(
            f"config expects {model_config.features} features, data has "
            f"{prepared.train.features.shape[2]}")
    seed = train_config.seeds[0]
    normalizer = Normalizer.fit(prepared.train)
    train_ws = normalizer.apply(prepared.train)
    model = build_model(model_config, seed)
    history = train(model, train_ws, train_config, seed)
    extra = {
        "variant": "base",
        "normalizer": normalizer.to_dict(),
        "train_config": train_config.to_dict(),
        "epochs_run": len(history),
        "best_val_mse": min(rec.val_mse for rec in history),
    }
    save_checkpoint(args.out, model, extra)
    if args.history is not None:
        write_history(args.history, history)
    print(f"trained seed {seed}: {len(history)} epochs, best val MSE "
          f"{FMT % extra['best_val_mse']} -> {args.out}")
    return EXIT_OK


def load_model_and_normalizer(ckpt_path) -> tuple:
    model, meta = load_checkpoint(ckpt_path)
    extra = meta.get("extra", {})
    if "normalizer" not in extra:
        raise DataFormatError(
            f"{ckpt_path}: checkpoint carries no normalizer; was it written "
            f"by `pace train`?")
    normalizer = Normalizer.from_dict(extra["normalizer"])
    return model, normalizer, extra


def cmd_eval(args) -> int:
    model, normalizer, extra = load_model_and_normalizer(args.ckpt)
    horizons = parse_horizons(args.horizons)
    prepared = build_prepared(args, model.config.window, model.config.horizons)
    test_ws = normalizer.apply(prepared.test)
    metrics = evaluate(model, test_ws, horizons)
    emit_lines(metrics_csv_lines(extra.get("variant", "base"), metrics),
               args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    model_config, train_config = load_run_config(args.config, args)
    prepared = build_prepared(args, model_config.window, model_config.horizons)
    eval_horizons = parse_horizons(args.eval_horizons)
    base, variant = run_ablation(model_config, args.variant, prepared,
                                 train_config, eval_horizons)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep, name in ((base, "base"), (variant, args.variant)):
        path = out_dir / f"{name}_report.json"
        path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True)
                        + "\n", encoding="utf-8")
    write_report([base, variant], out_dir)
    h = eval_horizons[-1]
    print(f"h={h}: base rmse {FMT % base.mean_rmse(h)} vs "
          f"{args.variant} rmse {FMT % variant.mean_rmse(h)} -> {out_dir}")
    return EXIT_OK


def cmd_importance(args) -> int:
    model, normalizer, _ = load_model_and_normalizer(args.ckpt)
    prepared = build_prepared(args, model.config.window, model.config.horizons)
    test_ws = normalizer.apply(prepared.test)
    result = permutation_importance(model, test_ws, args.seed)
    write_importance_csv(result, args.out)
    top = max(zip(result.percent, result.feature_names))
    print(f"top feature: {top[1]} ({FMT % top[0]}%) -> {args.out}")
    return EXIT_OK


def cmd_stream(args) -> int:
    model, normalizer, _ = load_model_and_normalizer(args.ckpt)
    horizons = parse_horizons(args.horizons)
    stats = StreamStats()

    def run(handle, sink) -> None:
        for line in stream_infer(model, normalizer, handle, horizons,
                                 stats=stats):
            sink.write(line + "\n")
            sink.flush()

    source = sys.stdin if args.input == "-" else open(
        args.input, "r", encoding="utf-8")
    try:
        if args.out is None:
            run(source, sys.stdout)
        else:
            with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                run(source, fh)
    finally:
        if source is not sys.stdin:
            source.close()
    logger.info("stream done: %d lines, %d cycles, %d predictions, "
                "%d malformed", stats.lines_read, stats.cycles_completed,
                stats.predictions, stats.malformed)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.runs:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"run report not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc}", path=str(path)) from exc
        reports.append(RunReport.from_dict(raw))
    importance = (read_importance_csv(args.importance)
                  if args.importance is not None else None)
    written = write_report(reports, args.out, importance)
    for path in written:
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pace",
        description="Battery state-of-health pipeline: circuit fitting, "
                    "windowing, training, evaluation, and streaming inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=handler)
        return p

    p = add("synth", cmd_synth, "generate a synthetic cycling fleet")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=8, help="training cells")
    p.add_argument("--test", type=int, default=2, help="held-out cells")
    p.add_argument("--cycles", type=int, default=400, help="cycles per cell")
    p.add_argument("--seed", type=int, default=7)

    p = add("fit-ecm", cmd_fit_ecm, "fit per-cycle circuit parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="feature table CSV")
    p.add_argument("--segment", choices=("discharge", "charge", "full"),
                   default="discharge")

    p = add("prepare", cmd_prepare, "build normalization-ready windows")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="feature table from fit-ecm "
                                      "(fitted in-process when omitted)")
    p.add_argument("--out", required=True, help="output npz")
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--horizons", default="1-50")

    p = add("train", cmd_train, "train one model and write a checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--prepared", help="windows npz from `pace prepare`")
    p.add_argument("--config", help="JSON with model/train sections")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="optional training history CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--horizons")

    p = add("eval", cmd_eval, "evaluate a checkpoint on held-out cells")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--prepared")
    p.add_argument("--horizons", default="1,30,50")
    p.add_argument("--out", help="metrics CSV (stdout when omitted)")

    p = add("ablate", cmd_ablate, "train base and variant, emit reports")
    p.add_argument("--variant", required=True,
                   choices=("no_physics", "single_head", "full_attention"))
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--prepared")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--eval-horizons", dest="eval_horizons", default="1,30,50")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--horizons")

    p = add("importance", cmd_importance, "permutation feature importance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--prepared")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="importance CSV")

    p = add("stream", cmd_stream, "per-cycle predictions from sample lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", default="-",
                   help="sample CSV path, or - for stdin (default)")
    p.add_argument("--out", help="prediction lines (stdout when omitted)")
    p.add_argument("--horizons", default="1,30,50")

    p = add("report", cmd_report, "render tables and figures from run JSONs")
    p.add_argument("--runs", nargs="+", required=True,
                   help="run report JSONs (e.g. from ablate)")
    p.add_argument("--importance", help="importance CSV to include")
    p.add_argument("--out", required=True, help="output directory")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; this tool reserves 2 for data errors
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    started = time.monotonic()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DegenerateFitError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PaceError as exc:
        # InputError, DataFormatError, DomainError and friends
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logger.info("%s finished in %.1fs", args.command,
                time.monotonic() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
