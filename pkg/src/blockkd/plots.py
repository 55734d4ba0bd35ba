"""Figure rendering for run reports; every chart lands next to its CSV."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def save_training_curves(rows: list[dict], losses_png, accuracy_png) -> None:
    """Loss terms and accuracies over epochs from metrics rows."""
    rows = [r for r in rows if r["epoch"] >= 0]
    if not rows:
        return
    epochs = [r["epoch"] for r in rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in (("L_task", "task"), ("L_distill", "distill"),
                       ("L_cross", "cross")):
        ax.plot(epochs, [r[key] for r in rows], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(losses_png, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["train_acc"] for r in rows], label="train")
    ax.plot(epochs, [r["test_acc"] for r in rows], label="test")
    ax.set_xlabel("epoch")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(accuracy_png, dpi=120)
    plt.close(fig)


def save_compare_chart(summary: list[dict], out_png) -> None:
    """Mean accuracy (with std bars) and ms/batch per grid variant."""
    if not summary:
        return
    names = [s["variant"] for s in summary]
    acc = [s["test_acc_mean"] for s in summary]
    std = [s["test_acc_std"] for s in summary]
    ms = [s["ms_per_batch_mean"] for s in summary]
    x = np.arange(len(names))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(x, acc, yerr=std, capsize=3, color="steelblue")
    ax1.set_xticks(x)
    ax1.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax1.set_ylabel("test accuracy (mean over seeds)")
    ax1.grid(alpha=0.3, axis="y")
    ax2.bar(x, ms, color="darkorange")
    ax2.set_xticks(x)
    ax2.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax2.set_ylabel("ms per batch")
    ax2.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_hightemp_figure(rows: list[tuple], out_png) -> None:
    """rel err vs temperature, one faint line per seed (log-log)."""
    by_seed: dict[int, list[tuple[float, float]]] = {}
    for seed, tau, _, _, rel in rows:
        by_seed.setdefault(seed, []).append((tau, rel))
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, pts in by_seed.items():
        pts.sort()
        ax.loglog([p[0] for p in pts], [max(p[1], 1e-12) for p in pts],
                  color="steelblue", alpha=0.25, linewidth=0.8)
    ax.set_xlabel("temperature")
    ax.set_ylabel("relative error of the limiting gradient")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_taylor_figure(rows: list[tuple], out_png) -> None:
    """First-order residual vs perturbation size for the smooth tails."""
    by_seed: dict[int, list[tuple[float, float]]] = {}
    for seed, tail, eps, err in rows:
        if tail == "smooth":
            by_seed.setdefault(seed, []).append((eps, err))
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, pts in by_seed.items():
        pts.sort()
        ax.loglog([p[0] for p in pts], [max(p[1], 1e-15) for p in pts],
                  color="seagreen", alpha=0.3, linewidth=0.8, marker="o",
                  markersize=2)
    ax.set_xlabel("perturbation size")
    ax.set_ylabel("relative error vs first-order expression")
    ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def save_pull_figure(rows: list[tuple], out_png) -> None:
    """Feature distance trace of the alignment descent, per seed."""
    by_seed: dict[int, list[tuple[int, float]]] = {}
    for seed, step, dist in rows:
        by_seed.setdefault(seed, []).append((step, dist))
    fig, ax = plt.subplots(figsize=(6, 4))
    for seed, pts in by_seed.items():
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts],
                color="indianred", alpha=0.3, linewidth=0.8)
    ax.set_xlabel("descent step")
    ax.set_ylabel("distance to the reference feature")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
