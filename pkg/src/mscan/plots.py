"""PNG renderings of training curves and ROC curves (matplotlib, Agg backend)."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .studyio import LEVELS, load_studies  # noqa: E402


def roc_curve(scores, labels):
    """False and true positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = np.cumsum(~y)[cut]
    tpr = np.r_[0.0, tp / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~y).sum(), 1)]
    return fpr, tpr


def plot_training(run_dir) -> list[Path]:
    """One figure per stage metrics log: loss (and accuracy when logged) per model."""
    run_dir = Path(run_dir)
    written = []
    for log in sorted(run_dir.glob("stage*_metrics.csv")):
        series = defaultdict(lambda: {"epoch": [], "loss": [], "accuracy": []})
        with open(log, newline="") as fh:
            for row in csv.DictReader(fh):
                s = series[row["model"]]
                s["epoch"].append(int(row["epoch"]))
                s["loss"].append(float(row["loss"]))
                s["accuracy"].append(float(row["accuracy"]) if row["accuracy"] else np.nan)
        if not series:
            continue
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(10, 4))
        for name, s in series.items():
            ax_l.plot(s["epoch"], s["loss"], marker="o", ms=3, label=name)
            if not np.all(np.isnan(s["accuracy"])):
                ax_a.plot(s["epoch"], s["accuracy"], marker="o", ms=3, label=name)
        ax_l.set(xlabel="epoch", ylabel="training loss", yscale="log", title=log.stem)
        ax_a.set(xlabel="epoch", ylabel="training accuracy", ylim=(0, 1.02))
        ax_l.legend()
        if ax_a.lines:
            ax_a.legend()
        fig.tight_layout()
        out = run_dir / f"{log.stem.replace('_metrics', '')}_curves.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written


def plot_roc(run_dir, data_root) -> Path:
    """Per-level binary ROC (NormalMild vs Moderate+Severe) from eval_predictions.csv."""
    run_dir = Path(run_dir)
    labels = {s.study_id: s.labels.as_array() for s in load_studies(data_root) if s.labels is not None}
    scores = defaultdict(list)
    truth = defaultdict(list)
    with open(run_dir / "eval_predictions.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["study_id"] not in labels:
                continue
            j = LEVELS.index(row["level"])
            scores[j].append(float(row["p_moderate"]) + float(row["p_severe"]))
            truth[j].append(int(labels[row["study_id"]][j] > 0))
    fig, ax = plt.subplots(figsize=(5, 5))
    for j, level in enumerate(LEVELS):
        y = np.asarray(truth[j])
        if len(y) and 0 < y.sum() < len(y):
            fpr, tpr = roc_curve(scores[j], y)
            ax.plot(fpr, tpr, label=level)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls="--")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title="held-out ROC, Moderate+Severe")
    if len(ax.lines) > 1:
        ax.legend(loc="lower right")
    fig.tight_layout()
    out = run_dir / "roc.png"
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
