"""PNG figure rendering for the evaluation/report path.

Renders the per-step error curves, qualitative prediction strips, and
training-loss traces next to the delimited outputs.  Everything goes
through the Agg backend so the functions work headless.
"""

from __future__ import annotations

import json

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

_DPI = 120


def load_jsonl(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def save_mse_curves(summary: dict, path) -> None:
    """Per-step MSE line per regime from an evaluation summary."""
    if not summary:
        raise ValueError("empty summary, nothing to plot")
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for regime in sorted(summary):
        curve = summary[regime]["per_step_mse"]
        steps = np.arange(1, len(curve) + 1)
        ax.plot(steps, curve, marker="o", markersize=3, label=regime)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("per-pixel MSE")
    ax.legend(frameon=False)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_prediction_strip(past, predicted, path, target=None) -> None:
    """Past frames and predictions as one row each (target row optional)."""
    past = np.asarray(past)
    predicted = np.asarray(predicted)
    rows = [("past", past), ("predicted", predicted)]
    if target is not None:
        rows.insert(1, ("target", np.asarray(target)))
    cols = max(arr.shape[0] for _, arr in rows)
    fig, axes = plt.subplots(len(rows), cols,
                             figsize=(1.1 * cols, 1.25 * len(rows)),
                             squeeze=False)
    for r, (label, arr) in enumerate(rows):
        for c in range(cols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < arr.shape[0]:
                frame = arr[c]
                if frame.ndim == 3:
                    frame = frame[0] if frame.shape[0] == 1 \
                        else frame.transpose(1, 2, 0)
                ax.imshow(frame, cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.axis("off")
        axes[r][0].set_ylabel(label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_loss_curve(records: list, path, keys=("total",)) -> None:
    """Loss traces over optimizer steps from parsed JSONL records."""
    if not records:
        raise ValueError("no log records to plot")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    for key in keys:
        if any(key in r for r in records):
            ax.plot(steps, [r.get(key, float("nan")) for r in records],
                    label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
