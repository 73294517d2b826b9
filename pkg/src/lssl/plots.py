"""Static figure emission from pipeline artifacts.

Four figure families: brain age vs chronological age with the fitted
control trend, per-group aging-speed box plots, the decoded traversal
strip, and accuracy-vs-epoch convergence curves per classification
setting. Plots are artifacts, not an interactive surface.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import EmptyInput  # noqa: E402
from .tensorfile import read_tensor  # noqa: E402

GROUP_COLORS = {"control": "tab:blue", "diseased": "tab:red"}


def plot_brain_age_scatter(analysis: dict, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for subj in analysis["subjects"]:
        color = GROUP_COLORS.get(subj["group"], "gray")
        ax.scatter(subj["ages"], subj["brain_age"], s=8, alpha=0.45, color=color, lw=0)
    for group, color in GROUP_COLORS.items():
        ax.scatter([], [], s=18, color=color, label=group)
    trend = analysis.get("trend_control")
    if trend:
        ages = [a for s in analysis["subjects"] for a in s["ages"]]
        lo, hi = min(ages), max(ages)
        xs = [lo + (hi - lo) * i / 99 for i in range(100)]
        ys = [trend["intercept"] + trend["linear"] * x + trend["quadratic"] * x * x for x in xs]
        ax.plot(xs, ys, color="black", lw=1.5, label="control trend")
    ax.set_xlabel("chronological age (years)")
    ax.set_ylabel("brain age (normalized)")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_aging_speed_box(analysis: dict, out_path: Path) -> None:
    groups = defaultdict(list)
    for subj in analysis["subjects"]:
        if subj["slope"] is not None:
            groups[subj["group"]].append(subj["slope"])
    if not groups:
        raise EmptyInput("no fitted slopes to plot")
    labels = sorted(groups)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.boxplot([groups[g] for g in labels], tick_labels=labels)
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_ylabel("aging speed (slope of brain age vs age)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_traversal_strip(analysis_dir: Path, analysis: dict, out_path: Path) -> None:
    targets = analysis["traversal"]["targets"]
    images = [read_tensor(analysis_dir / f"traversal_{i:02d}.ten")
              for i in range(len(targets))]
    if not images:
        raise EmptyInput("no traversal images to plot")
    fig, axes = plt.subplots(1, len(images), figsize=(2.2 * len(images), 2.6))
    if len(images) == 1:
        axes = [axes]
    for ax, img, target in zip(axes, images, targets):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"score {target:.2f}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_convergence(eval_csv: Path, out_dir: Path) -> list[Path]:
    """One mean-accuracy-vs-epoch figure per classification setting."""
    series = defaultdict(lambda: defaultdict(list))  # setting -> (method, mode) -> [(epoch, acc)]
    with open(eval_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            series[row["setting"]][(row["method"], row["mode"])].append(
                (int(row["epoch"]), float(row["accuracy"])))
    written = []
    for setting, curves in sorted(series.items()):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for (method, mode), points in sorted(curves.items()):
            by_epoch = defaultdict(list)
            for epoch, acc in points:
                by_epoch[epoch].append(acc)
            epochs = sorted(by_epoch)
            means = [sum(by_epoch[e]) / len(by_epoch[e]) for e in epochs]
            ax.plot(epochs, means, marker="o", ms=2.5, lw=1.2, label=f"{method} ({mode})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_title(setting.replace("_", " "))
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = out_dir / f"convergence_{setting}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written


def emit_all(results_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Render every figure the available artifacts support."""
    results_dir = Path(results_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    analysis_path = results_dir / "analysis" / "analysis.json"
    if analysis_path.exists():
        analysis = json.loads(analysis_path.read_text())
        p = out_dir / "brain_age_scatter.png"
        plot_brain_age_scatter(analysis, p)
        written.append(p)
        p = out_dir / "aging_speed_box.png"
        plot_aging_speed_box(analysis, p)
        written.append(p)
        p = out_dir / "traversal_strip.png"
        plot_traversal_strip(analysis_path.parent, analysis, p)
        written.append(p)
    eval_csv = results_dir / "eval" / "eval.csv"
    if eval_csv.exists():
        written.extend(plot_convergence(eval_csv, out_dir))
    if not written:
        raise EmptyInput(f"no analysis or evaluation artifacts under {results_dir}")
    return written
