"""Result emission: run log, aggregate table, heatmaps, bar chart.

Everything written here is meant to be committed next to the experiment
config, so output is deterministic for deterministic inputs: CSV rows are
sorted, floats are serialized with str(), and the SVG backend gets a fixed
hash salt and no embedded timestamps.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg", force=True)
matplotlib.rcParams["svg.hashsalt"] = "dsm-forge"

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
from matplotlib.patches import Rectangle  # noqa: E402

from .dsm import load_ground_truth
from .runner import AggregateReport, RunRecord, experiment_config_to_json

CSV_HEADER = [
    "method",
    "refs",
    "model",
    "metric",
    "mean",
    "std",
    "ok",
    "parse_failed",
    "backend_failed",
    "invalid_after_validation",
]

CELL_COLORS = {0: "#ffffff", 1: "#30507c", 2: "#bdbdbd"}
MISMATCH_COLOR = "#c0392b"


class ReportingError(Exception):
    pass


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower() or "report"


def _counts_dict(counts) -> dict | None:
    if counts is None:
        return None
    return {
        "tp": counts.tp,
        "tn": counts.tn,
        "fp": counts.fp,
        "fn": counts.fn,
        "excluded": counts.excluded,
    }


def record_to_dict(record: RunRecord, report: AggregateReport) -> dict:
    cfg = report.config
    return {
        "method": cfg.method,
        "refs": cfg.refs_label,
        "model": cfg.backend.model_id,
        "scenario": report.scenario,
        "ground_truth": cfg.ground_truth,
        "repetition": record.repetition,
        "status": record.status,
        "error": record.error,
        "identified": list(record.identified) if record.identified else None,
        "raw_labels": list(record.raw_labels) if record.raw_labels else None,
        "raw_cells": [list(r) for r in record.raw_cells] if record.raw_cells else None,
        "raw_dimension": len(record.raw_cells) if record.raw_cells else None,
        "confusion": _counts_dict(record.counts),
        "cell_metrics": record.cell.as_dict() if record.cell else None,
        "graph_distances": record.graph.as_dict() if record.graph else None,
        "aligned_dimension": record.aligned_pred.n if record.aligned_pred else None,
        "aligned_confusion": _counts_dict(record.aligned_counts),
        "aligned_cell_metrics": (
            record.aligned_cell.as_dict() if record.aligned_cell else None
        ),
        "aligned_graph_distances": (
            record.aligned_graph.as_dict() if record.aligned_graph else None
        ),
        "unmatched_pred_labels": list(record.unmatched_pred_labels),
        "unmatched_truth_labels": list(record.unmatched_truth_labels),
        "corrective_exchanges": record.corrective_exchanges,
        "alignment_note": record.alignment_note,
        "config": json.loads(experiment_config_to_json(cfg)),
    }


def write_runs_jsonl(reports, path) -> Path:
    path = Path(path)
    lines = []
    for report in reports:
        if report.error is not None and not report.records:
            lines.append(
                {
                    "method": report.config.method,
                    "refs": report.config.refs_label,
                    "model": report.config.backend.model_id,
                    "scenario": report.scenario,
                    "status": "config_failed",
                    "error": report.error,
                }
            )
        for record in report.records:
            lines.append(record_to_dict(record, report))
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def _csv_rows(report: AggregateReport) -> list[list[str]]:
    cfg = report.config
    prefix = [cfg.method, cfg.refs_label, cfg.backend.model_id]
    counts = [
        str(report.status_counts.get(status, 0))
        for status in ("ok", "parse_failed", "backend_failed", "invalid_after_validation")
    ]
    rows = []
    named = [(name, agg) for name, agg in report.aggregates.items()]
    named += [(f"aligned_{name}", agg) for name, agg in report.aligned_aggregates.items()]
    for name, agg in named:
        rows.append(prefix + [name, str(agg.mean), str(agg.std)] + counts)
    if not named:
        rows.append(prefix + ["error", "", ""] + counts)
    return rows


def write_aggregate_csv(reports, path) -> Path:
    path = Path(path)
    rows: list[list[str]] = []
    for report in reports:
        rows.extend(_csv_rows(report))
    rows.sort()
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    return path


def best_record(report: AggregateReport) -> RunRecord | None:
    """Best completed repetition, ranked by accuracy and then F1."""

    def rank(record: RunRecord):
        cell = record.cell
        accuracy = cell.accuracy if cell and cell.accuracy is not None else -1.0
        f1 = cell.f1 if cell and cell.f1 is not None else -1.0
        return (-accuracy, -f1, record.repetition)

    candidates = [r for r in report.records if r.status == "ok"]
    if not candidates:
        return None
    return min(candidates, key=rank)


def _heatmap_axes(ax, labels, cells, truth_cells) -> None:
    n = len(cells)
    for i in range(n):
        for j in range(n):
            rect = Rectangle(
                (j, n - 1 - i), 1, 1,
                facecolor=CELL_COLORS.get(cells[i][j], "#f0e040"),
                edgecolor="#555555",
                linewidth=0.6,
            )
            rect.set_gid(f"cell-{i}-{j}")
            ax.add_patch(rect)
            if truth_cells is not None and cells[i][j] != truth_cells[i][j]:
                miss = Rectangle(
                    (j + 0.12, n - 1 - i + 0.12), 0.76, 0.76,
                    facecolor="none",
                    edgecolor=MISMATCH_COLOR,
                    linewidth=1.6,
                )
                miss.set_gid(f"mismatch-{i}-{j}")
                ax.add_patch(miss)
    ax.set_xlim(0, n)
    ax.set_ylim(0, n)
    ax.set_xticks([k + 0.5 for k in range(n)])
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticks([n - 1 - k + 0.5 for k in range(n)])
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_aspect("equal")
    ax.tick_params(length=0)


def write_heatmap_svg(report: AggregateReport, path) -> Path | None:
    """Render the best run's DSM; outlined cells disagree with the truth."""
    record = best_record(report)
    if record is None or record.raw_cells is None:
        return None
    truth = load_ground_truth(report.config.ground_truth).dsm
    if record.aligned_pred is not None and record.aligned_pred.n > 0:
        labels = record.aligned_pred.labels
        cells = [list(r) for r in record.aligned_pred.cells]
        truth_cells = [list(r) for r in record.aligned_truth.cells]
        note = f"aligned {record.aligned_pred.n}x{record.aligned_pred.n} (raw {len(record.raw_cells)})"
    else:
        labels = record.raw_labels or tuple(
            f"C{k + 1}" for k in range(len(record.raw_cells))
        )
        cells = [list(r) for r in record.raw_cells]
        truth_cells = (
            [list(r) for r in truth.cells] if truth.n == len(cells) else None
        )
        note = f"raw {len(cells)}x{len(cells)}"
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.8, 4.8))
    try:
        _heatmap_axes(ax, labels, cells, truth_cells)
        ax.set_title(
            f"{report.label} rep {record.repetition} ({note})", fontsize=8
        )
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path


def write_bar_chart_svg(reports, path) -> Path:
    """Grouped bars of metric means with population-std error bars."""
    cell_keys = ["accuracy", "precision", "recall", "f1"]
    dist_keys = ["edit_distance", "spectral_distance"]
    series = []
    for report in reports:
        if report.aggregates:
            series.append((report.label, report.aggregates))
        if report.aligned_aggregates:
            series.append((f"{report.label} (aligned)", report.aligned_aggregates))
    path = Path(path)
    fig, (ax_cell, ax_dist) = plt.subplots(1, 2, figsize=(10, 4.2))
    try:
        for ax, keys, title in (
            (ax_cell, cell_keys, "cell metrics (unsure excluded)"),
            (ax_dist, dist_keys, "graph distances"),
        ):
            width = 0.8 / max(len(series), 1)
            for s, (label, aggs) in enumerate(series):
                xs = [
                    k + s * width - 0.4 + width / 2 for k in range(len(keys))
                ]
                means = [aggs[k].mean if k in aggs else 0.0 for k in keys]
                stds = [aggs[k].std if k in aggs else 0.0 for k in keys]
                ax.bar(xs, means, width=width, yerr=stds, capsize=2, label=label)
            ax.set_xticks(range(len(keys)))
            ax.set_xticklabels(keys, fontsize=8)
            ax.set_title(title, fontsize=9)
        handles, labels = ax_cell.get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels, fontsize=7, loc="lower center",
                       ncol=min(len(labels), 3))
        fig.suptitle("mean over completed repetitions (error bars: population std)",
                     fontsize=9)
        fig.tight_layout(rect=(0, 0.12, 1, 0.95))
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path


def emit_reports(reports, outdir) -> list[Path]:
    """Write runs.jsonl, aggregate.csv, per-report heatmaps, and bars.svg."""
    reports = list(reports)
    if not reports:
        raise ReportingError("no reports to emit")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = [
        write_runs_jsonl(reports, outdir / "runs.jsonl"),
        write_aggregate_csv(reports, outdir / "aggregate.csv"),
    ]
    for i, report in enumerate(reports):
        target = outdir / f"heatmap_{i:02d}_{_slug(report.label)}.svg"
        out = write_heatmap_svg(report, target)
        if out is not None:
            written.append(out)
    written.append(write_bar_chart_svg(reports, outdir / "bars.svg"))
    return written
