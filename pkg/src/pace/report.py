"""Result tables, summary text, and figures for one or more runs.

Everything here is deterministic: equal inputs produce byte-identical
CSVs, text, and PNGs, so report directories can be regenerated and
diffed.  Seed-averaged metrics are serialized at 9 significant digits;
the efficiency column is derived from the serialized rmse and
parameter-count strings and stored at full round-trip precision, so a
reader re-deriving it from the CSV reproduces it exactly.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from pathlib import Path

from .errors import InputError
from .train import ImportanceResult, RunReport

COMPARISON_HEADER = "variant,params_k,flops_m,h,rmse,mae,eta"
ABLATION_HEADER = COMPARISON_HEADER + ",delta_rmse"
IMPORTANCE_HEADER = "feature,percent,raw_delta_rmse"

# savefig writes a Software tag by default; dropping it keeps PNG bytes
# a pure function of the figure content
_PNG_OPTS = {"dpi": 120, "metadata": {"Software": None}}


def _fmt(value: float) -> str:
    return "%.9g" % value


def _write_text(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _variant_rows(report: RunReport) -> list:
    """Per-horizon comparison rows with the eta/rmse consistency contract.

    eta comes from the serialized rmse/params_k strings and is printed
    at full round-trip precision, so recomputing it from the CSV columns
    reproduces the stored value exactly.
    """
    params_k = _fmt(report.metrics[0].param_count / 1000.0)
    flops_m = _fmt(report.metrics[0].flops / 1e6)
    rows = []
    for h in report.metrics[0].horizons:
        rmse = _fmt(report.mean_rmse(h))
        mae = _fmt(float(np.mean([m.mae[h] for m in report.metrics])))
        eta = repr(1000.0 / (float(rmse) * float(params_k)))
        rows.append((report.variant, params_k, flops_m, str(h), rmse, mae, eta))
    return rows


def write_comparison_csv(reports, path) -> None:
    lines = [COMPARISON_HEADER]
    for report in reports:
        lines.extend(",".join(row) for row in _variant_rows(report))
    _write_text(Path(path), lines)


def write_ablation_csv(reports, path) -> None:
    """Comparison rows plus each variant's rmse delta against the base."""
    base = next((r for r in reports if r.variant == "base"), None)
    if base is None:
        raise InputError("ablation table needs a run with variant 'base'")
    lines = [ABLATION_HEADER]
    for report in reports:
        for row in _variant_rows(report):
            h = int(row[3])
            delta = _fmt(report.mean_rmse(h) - base.mean_rmse(h))
            lines.append(",".join(row + (delta,)))
    _write_text(Path(path), lines)


def write_importance_csv(result: ImportanceResult, path) -> None:
    lines = [IMPORTANCE_HEADER]
    for name, pct, raw in zip(result.feature_names, result.percent, result.raw):
        lines.append(f"{name},{_fmt(pct)},{_fmt(raw)}")
    _write_text(Path(path), lines)


def read_importance_csv(path) -> ImportanceResult:
    """Rebuild an importance table written by ``write_importance_csv``.

    The base RMSE is not stored in the CSV; it comes back as NaN, which
    the table and figure renderers never read.
    """
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise InputError(f"importance table not found: {path}") from None
    if not lines or lines[0] != IMPORTANCE_HEADER:
        raise InputError(f"{path}: not an importance table")
    names, pct, raw = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise InputError(f"{path}:{lineno}: expected 3 columns")
        try:
            names.append(parts[0])
            pct.append(float(parts[1]))
            raw.append(float(parts[2]))
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad number") from None
    return ImportanceResult(feature_names=tuple(names),
                            base_rmse=float("nan"),
                            raw=np.array(raw), percent=np.array(pct))


def write_summary(reports, path) -> None:
    """Plain-text digest naming the most size-efficient variant."""
    best = max(reports, key=lambda r: r.mean_eta())
    lines = [
        f"runs: {len(reports)}",
        f"best efficiency: {best.variant} (mean eta {_fmt(best.mean_eta())})",
        "",
    ]
    for report in reports:
        h_last = report.metrics[0].horizons[-1]
        stops = [len(hist) for hist in report.histories]
        lines.append(
            f"{report.variant}: seeds={list(report.seeds)} "
            f"params={report.metrics[0].param_count} "
            f"rmse_h{h_last}={_fmt(report.mean_rmse(h_last))}"
            f"+/-{_fmt(report.std_rmse(h_last))} "
            f"epochs={stops} digest={report.config_digest[:12]}")
    _write_text(Path(path), lines)


def _new_axes():
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    return fig, ax


def plot_rmse_vs_horizon(reports, path) -> None:
    fig, ax = _new_axes()
    for report in reports:
        hs = list(report.metrics[0].horizons)
        mean = [report.mean_rmse(h) for h in hs]
        std = [report.std_rmse(h) for h in hs]
        ax.errorbar(hs, mean, yerr=std, marker="o", capsize=3,
                    label=report.variant)
    ax.set_xlabel("prediction horizon (cycles)")
    ax.set_ylabel("RMSE (SoH fraction)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def plot_efficiency(reports, path) -> None:
    fig, ax = _new_axes()
    names = [r.variant for r in reports]
    values = [r.mean_eta() for r in reports]
    ax.bar(range(len(names)), values, tick_label=names)
    ax.set_ylabel("efficiency (1000 / (RMSE x kparams))")
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def plot_history(reports, path) -> None:
    fig, ax = _new_axes()
    for report in reports:
        for seed, hist in zip(report.seeds, report.histories):
            epochs = [rec.epoch for rec in hist]
            ax.plot(epochs, [rec.train_mse for rec in hist], alpha=0.8,
                    label=f"{report.variant} s{seed} train")
            ax.plot(epochs, [rec.val_mse for rec in hist], alpha=0.8,
                    linestyle="--", label=f"{report.variant} s{seed} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def plot_importance(result: ImportanceResult, path) -> None:
    fig, ax = _new_axes()
    order = np.argsort(result.percent)[::-1]
    ax.bar(range(len(order)), result.percent[order],
           tick_label=[result.feature_names[i] for i in order])
    ax.set_ylabel("permutation importance (%)")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, **_PNG_OPTS)
    plt.close(fig)


def write_report(reports, out_dir, importance: ImportanceResult | None = None) -> list:
    """Render every table and figure for ``reports`` into ``out_dir``.

    Returns the sorted list of paths written.  With more than one run an
    ablation table (deltas against the ``base`` variant) is added; with
    an ``importance`` result the per-feature table and bar chart are.
    """
    reports = list(reports)
    if not reports:
        raise InputError("write_report needs at least one run report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []

    def emit(name, fn, *args):
        target = out_dir / name
        fn(*args, target)
        written.append(target)

    emit("comparison.csv", write_comparison_csv, reports)
    emit("summary.txt", write_summary, reports)
    emit("rmse_vs_horizon.png", plot_rmse_vs_horizon, reports)
    emit("efficiency.png", plot_efficiency, reports)
    emit("history.png", plot_history, reports)
    if len(reports) > 1:
        emit("ablation.csv", write_ablation_csv, reports)
    if importance is not None:
        emit("importance.csv", write_importance_csv, importance)
        emit("importance.png", plot_importance, importance)
    return sorted(written)
