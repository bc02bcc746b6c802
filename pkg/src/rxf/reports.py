"""Run-directory artifacts: metrics CSV, sweep/report tables, SVG figures.

Figures are rendered straight from the CSV files they accompany, with a
fixed SVG hash salt and no date metadata, so regenerating a plot from
the same CSV yields byte-identical output.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict

from matplotlib import rc_context
from matplotlib.figure import Figure

from .errors import DataError

METRICS_HEADER = ["run_id", "phase", "epoch", "clean_acc", "robust_acc",
                  "clean_loss", "adv_loss", "penalty", "wall_clock"]
SWEEP_HEADER = ["axis", "value", "clean_acc", "robust_acc", "clean_loss", "adv_loss", "run_id"]

_SVG_RC = {"svg.hashsalt": "rxf", "svg.fonttype": "path"}


def append_metrics(path: str, rows: list[dict]):
    """Append MetricsRecord rows; writes the header on first use."""
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_HEADER)
        if fresh:
            w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in METRICS_HEADER})


def write_sweep_csv(path: str, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in SWEEP_HEADER})


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save_svg(fig: Figure, path: str):
    with rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})


def plot_sweep(csv_path: str, svg_path: str):
    """Two-curve accuracy/robustness plot against the sweep axis.

    Pure function of the CSV contents: the figure is built solely from
    the rows on disk.
    """
    rows = _read_csv(csv_path)
    if not rows:
        raise DataError(f"{csv_path}: sweep CSV is empty")
    for col in ("value", "clean_acc", "robust_acc"):
        if col not in rows[0]:
            raise DataError(f"{csv_path}: missing column {col!r}")
    axis = rows[0].get("axis", "value")
    xs = [float(r["value"]) for r in rows]
    acc = [100 * float(r["clean_acc"]) for r in rows]
    rob = [100 * float(r["robust_acc"]) for r in rows]
    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.add_subplot(111)
    ax.plot(xs, acc, marker="o", color="#1f77b4", label="clean accuracy")
    ax.plot(xs, rob, marker="s", color="#d62728", label="robust accuracy")
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    _save_svg(fig, svg_path)


def consolidate_report(run_dir: str, out_csv: str, out_svg: str) -> list[dict]:
    """Merge all run metrics under a directory into a (source mode,
    transfer mode) grid, writing the table and a bar figure."""
    found = []
    for root, _, files in os.walk(run_dir):
        if "metrics.csv" in files:
            found.append(root)
    if not found:
        raise DataError(f"{run_dir}: no metrics.csv found in any run directory")
    groups: dict[tuple, list] = defaultdict(list)
    for root in sorted(found):
        mpath = os.path.join(root, "metrics.csv")
        rows = _read_csv(mpath)
        if not rows:
            raise DataError(f"{mpath}: metrics CSV is empty")
        for col in ("clean_acc", "robust_acc"):
            if col not in rows[0]:
                raise DataError(f"{mpath}: missing column {col!r}")
        evals = [r for r in rows if r["phase"] == "eval" and r["robust_acc"] != ""]
        if not evals:
            continue
        cfg_path = os.path.join(root, "config.json")
        source_mode, transfer_mode = "?", "?"
        if os.path.exists(cfg_path):
            with open(cfg_path) as f:
                cfg = json.load(f)
            source_mode = cfg.get("source", {}).get("mode", source_mode)
            transfer_mode = cfg.get("transfer", {}).get("mode", transfer_mode)
        manifest_path = os.path.join(root, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path) as f:
                manifest = json.load(f)
            source_mode = manifest.get("source_mode") or source_mode
            transfer_mode = manifest.get("transfer_mode") or transfer_mode
        last = evals[-1]
        groups[(source_mode, transfer_mode)].append(
            (float(last["clean_acc"]), float(last["robust_acc"]))
        )
    if not groups:
        raise DataError(f"{run_dir}: no eval rows found in any metrics.csv")
    table = []
    for (src, tr), vals in sorted(groups.items()):
        accs = [v[0] for v in vals]
        robs = [v[1] for v in vals]
        table.append({
            "source_mode": src,
            "transfer_mode": tr,
            "runs": len(vals),
            "clean_acc": sum(accs) / len(accs),
            "robust_acc": sum(robs) / len(robs),
        })
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["source_mode", "transfer_mode", "runs", "clean_acc", "robust_acc"])
        w.writeheader()
        for row in table:
            w.writerow(row)
    _plot_report(out_csv, out_svg)
    return table


def _plot_report(csv_path: str, svg_path: str):
    rows = _read_csv(csv_path)
    labels = [f"{r['source_mode']}+{r['transfer_mode']}" for r in rows]
    acc = [100 * float(r["clean_acc"]) for r in rows]
    rob = [100 * float(r["robust_acc"]) for r in rows]
    x = range(len(rows))
    fig = Figure(figsize=(max(4.0, 1.6 * len(rows)), 3.4))
    ax = fig.add_subplot(111)
    width = 0.38
    ax.bar([i - width / 2 for i in x], acc, width, color="#1f77b4", label="clean accuracy")
    ax.bar([i + width / 2 for i in x], rob, width, color="#d62728", label="robust accuracy")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    _save_svg(fig, svg_path)
