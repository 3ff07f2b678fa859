"""Report rendering: delimited outputs plus matplotlib figures.

Every training or evaluation run that takes an output directory gets its
numbers as CSV/JSON and a rendered PNG next to them.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_training_log(path, history):
    """Per-step CSV: step, epoch, lr, loss."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", "lr", "loss"])
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in writer.fieldnames})


def write_epoch_metrics(path, reports):
    """Per-epoch CSV of the validation metrics."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "task", "ccc_v", "ccc_a", "macro_f1", "summary"])
        for epoch, report in enumerate(reports, start=1):
            writer.writerow([
                epoch, report.task,
                _fmt(report.ccc_v), _fmt(report.ccc_a), _fmt(report.macro_f1),
                _fmt(report.summary),
            ])


def write_fold_csv(path, table):
    """Fold table CSV: one row per (task, metric), one column per fold."""
    k = table["k"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "metric"] + [f"fold_{i}" for i in range(k)])
        for row in table["rows"]:
            writer.writerow([row["task"], row["metric"]] + [_fmt(s) for s in row["scores"]])


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def plot_training(history, reports, path):
    """Loss/lr per step and the per-epoch validation metric."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    if history:
        steps = [row["step"] for row in history]
        axes[0].plot(steps, [row["loss"] for row in history], label="loss", color="tab:blue")
        axes[0].set_xlabel("step")
        axes[0].set_ylabel("loss")
        twin = axes[0].twinx()
        twin.plot(steps, [row["lr"] for row in history], label="lr", color="tab:orange", alpha=0.6)
        twin.set_ylabel("learning rate")
        axes[0].set_title("training loss / lr")
    if reports:
        epochs = np.arange(1, len(reports) + 1)
        axes[1].plot(epochs, [r.summary for r in reports], marker="o")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation metric")
        axes[1].set_title(f"{reports[0].task} validation")
        axes[1].grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fold_table(table, path):
    """Grouped bars: one group per (task, metric) row, one bar per fold."""
    rows = table["rows"]
    k = table["k"]
    fig, ax = plt.subplots(figsize=(1.6 * max(len(rows), 2) + 2, 4))
    width = 0.8 / k
    xs = np.arange(len(rows))
    for fold in range(k):
        vals = [row["scores"][fold] for row in rows]
        ax.bar(xs + fold * width, vals, width, label=f"fold {fold}")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([f"{r['task']}\n({r['metric']})" for r in rows])
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    ax.set_title("per-fold validation scores")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mae_history(history, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([row["step"] for row in history], [row["loss"] for row in history])
    ax.set_xlabel("step")
    ax.set_ylabel("reconstruction loss")
    ax.set_title("masked-patch reconstruction")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_outputs(out_dir, result, task):
    """Standard artifact set for one training run."""
    os.makedirs(out_dir, exist_ok=True)
    write_training_log(os.path.join(out_dir, "log.csv"), result.history)
    write_epoch_metrics(os.path.join(out_dir, "epoch_metrics.csv"), result.epoch_reports)
    plot_training(result.history, result.epoch_reports,
                  os.path.join(out_dir, "training_curve.png"))
