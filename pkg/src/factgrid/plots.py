"""Figure rendering for the report path.

Every report-producing command can drop PNG figures next to its delimited
output: the training loss curve, top-k accuracy bars, and the per-pair
accuracy-gap ranking. Rendering uses the Agg backend so it works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def save_training_curve(rows, path) -> None:
    """Per-batch loss dots with the per-epoch mean drawn on top."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    iters = [row.iteration for row in rows]
    losses = [row.batch_loss for row in rows]
    ax.plot(iters, losses, ".", ms=2.5, color="#9ecae1", label="batch loss")
    epochs = sorted({row.epoch for row in rows})
    centers, means = [], []
    for epoch in epochs:
        members = [row for row in rows if row.epoch == epoch]
        centers.append(np.mean([row.iteration for row in members]))
        means.append(np.mean([row.batch_loss for row in members]))
    ax.plot(centers, means, "o-", color="#08519c", label="epoch mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_topk_bars(reports, path, chance=None) -> None:
    """Grouped top-k accuracy bars, one group per report.

    ``chance`` optionally maps k to the constant-score baseline, drawn as
    short dashed levels alongside each group.
    """
    reports = list(reports)
    ks = reports[0].ks
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    base = np.arange(len(ks))
    for r, report in enumerate(reports):
        offset = (r - (len(reports) - 1) / 2) * width
        values = [report.summary[k] for k in ks]
        ax.bar(base + offset, values, width * 0.9,
               label=f"{report.model_id} ({report.policy})")
    if chance:
        for x, k in enumerate(ks):
            if k in chance:
                ax.hlines(chance[k], x - 0.4, x + 0.4,
                          colors="0.3", linestyles="dashed", lw=1.0)
    ax.set_xticks(base, [f"top-{k}" for k in ks])
    ax.set_ylabel("accuracy (mean over pairs)")
    ax.set_ylim(0.0, 1.0)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def save_gap_chart(gap_rows, path, label_a, label_b, k, slice_n=10) -> None:
    """Horizontal bars for the pairs where model a most beats / trails b."""
    head = gap_rows[:slice_n]
    tail = gap_rows[-slice_n:] if len(gap_rows) > slice_n else []
    rows = head + [r for r in tail if r not in head]
    names = [f"{r.adjective} {r.noun}" for r in rows]
    gaps = [r.gap for r in rows]
    colors = ["#2ca25f" if g >= 0 else "#de2d26" for g in gaps]
    fig, ax = plt.subplots(figsize=(6.4, max(3.0, 0.3 * len(rows) + 1.2)))
    pos = np.arange(len(rows))[::-1]
    ax.barh(pos, gaps, color=colors)
    ax.set_yticks(pos, names, fontsize=7)
    ax.axvline(0.0, color="0.2", lw=0.8)
    ax.set_xlabel(f"top-{k} accuracy gap ({label_a} minus {label_b})")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
