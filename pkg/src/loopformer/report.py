"""Report figures: training curves and ablation-suite charts rendered to PNG
next to the delimited outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_training(out_dir: str) -> list[str]:
    """Loss/accuracy curves from a run's metrics stream."""
    from loopformer.train import read_metrics

    records = read_metrics(out_dir)
    if not records:
        return []
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    written = []

    steps = [r["step"] for r in records]
    losses = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = os.path.join(fig_dir, "loss.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    evals = [(r["step"], r["eval"]) for r in records if "eval" in r]
    if evals:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([s for s, _ in evals], [e["pass@1"] for _, e in evals],
                marker="o", label="exact match")
        ax.plot([s for s, _ in evals], [e["cell_accuracy"] for _, e in evals],
                marker="s", label="cell accuracy")
        ax.set_xlabel("step")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = os.path.join(fig_dir, "accuracy.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_suite(rows: list[dict], metric: str, path: str, title: str = "") -> str:
    """Bar chart of one suite metric (mean over seeds) per config label."""
    done = [r for r in rows if r.get("status") == "done"]
    labels = [r["label"] for r in done]
    values = [r[metric] for r in done]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(labels)), 4))
    bars = ax.bar(range(len(labels)), values, color="#4878d0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    for bar, v in zip(bars, values):
        ax.annotate(f"{v:.3f}", (bar.get_x() + bar.get_width() / 2, v),
                    ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_curves(curves: dict[str, list[tuple[int, float]]], path: str,
                       title: str = "") -> str:
    """Overlayed loss-vs-step curves (optimizer comparisons)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, points in curves.items():
        ax.plot([p[0] for p in points], [p[1] for p in points], label=label, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
