"""Run artifacts: JSON reports, CSV histories, rendered figures, tables.

Every writer here is byte-deterministic: JSON is sorted and indented,
CSV rows follow the caller's field order, and figures are rendered
with the Agg backend at fixed size/DPI with the metadata matplotlib
would otherwise vary stripped down to a constant.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_PNG_METADATA = {"Software": "scprompt"}


def write_report_json(path, report: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def write_history_csv(path, rows, fields):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow(["" if row.get(f) is None else repr(row[f])
                             if isinstance(row.get(f), float) else row.get(f)
                             for f in fields])


def _series(rows, key):
    xs = [r["epoch"] for r in rows if r.get(key) is not None]
    ys = [r[key] for r in rows if r.get(key) is not None]
    return xs, ys


def render_history_png(path, rows, metric_keys):
    """Two panels: training loss per epoch, validation metrics per epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5), dpi=110)
    xs, ys = _series(rows, "train_loss")
    if xs:
        ax_loss.plot(xs, ys, marker="o", color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_title("training loss")
    ax_loss.grid(True, alpha=0.3)
    plotted = False
    for key in metric_keys:
        xs, ys = _series(rows, key)
        if xs:
            ax_val.plot(xs, ys, marker="o", label=key)
            plotted = True
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("value")
    ax_val.set_title("validation metrics")
    ax_val.set_ylim(-0.02, 1.02)
    ax_val.grid(True, alpha=0.3)
    if plotted:
        ax_val.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def write_ablation_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "accuracy", "error"])
        for row in rows:
            acc = row["accuracy"]
            writer.writerow([row["l"], "" if acc is None else repr(acc),
                             row["error"]])


def render_ablation_png(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=110)
    done = [(r["l"], r["accuracy"]) for r in rows if r["accuracy"] is not None]
    if done:
        ls, accs = zip(*done)
        ax.plot(ls, accs, marker="s", color="tab:blue")
        ax.set_xscale("log", base=2)
        ax.set_xticks(list(ls))
        ax.set_xticklabels([str(l) for l in ls])
    ax.set_xlabel("experts (l)")
    ax.set_ylabel("val accuracy")
    ax.set_title("expert-count ablation")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def format_table(rows, fields, precision: int = 4) -> str:
    """Aligned fixed-width text table for console echo."""

    def cell(value):
        if value is None:
            return "-"
        if isinstance(value, float):
            return f"{value:.{precision}f}"
        return str(value)

    grid = [[str(f) for f in fields]]
    grid += [[cell(row.get(f)) for f in fields] for row in rows]
    widths = [max(len(r[i]) for r in grid) for i in range(len(fields))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
             for r in grid]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
