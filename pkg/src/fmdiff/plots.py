"""Matplotlib figures for run reports (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)


def loss_curves(path, curves: dict) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, losses in curves.items():
        losses = np.asarray(losses)
        if losses.size == 0:
            continue
        w = max(1, losses.size // 200)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(smooth.size) + w - 1, smooth, label=name, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    _save(fig, path)


def posterior_panels(path, data) -> None:
    """``data``: list of ``(entry, model_samples, oracle_samples)`` for 2-D signals."""
    fig, axes = plt.subplots(len(data), 2, figsize=(7, 2.4 * len(data)), squeeze=False)
    for row, (entry, s, ref) in zip(axes, data):
        for k, ax in enumerate(row):
            bins = np.linspace(min(s[:, k].min(), ref[:, k].min()), max(s[:, k].max(), ref[:, k].max()), 40)
            ax.hist(ref[:, k], bins, alpha=0.5, density=True, label="analytic")
            ax.hist(s[:, k], bins, alpha=0.5, density=True, label="sampled")
            ax.set_title(f"ctx pose {entry['phi_ctxt']}, O={entry['O_ctxt']}: S[{k}]", fontsize=8)
        row[0].legend(fontsize=7)
    _save(fig, path)


def frequency_bars(path, bars) -> None:
    fig, axes = plt.subplots(1, len(bars), figsize=(3.2 * len(bars), 2.8), squeeze=False)
    for ax, (title, freq, truth) in zip(axes[0], bars):
        x = np.arange(len(truth))
        ax.bar(x - 0.2, truth, 0.4, label="true")
        ax.bar(x + 0.2, freq, 0.4, label="sampled")
        ax.set_xticks(x)
        ax.set_title(title, fontsize=8)
    axes[0, 0].legend(fontsize=7)
    _save(fig, path)


def render_panel(path, context, samples, deterministic, mode_refs) -> None:
    rows = [context, *samples, deterministic]
    labels = ["context"] + [f"sample {i}" for i in range(len(samples))] + ["deterministic"]
    fig, ax = plt.subplots(figsize=(4, 0.3 * len(rows) + 1))
    ax.imshow(np.clip(np.stack(rows), 0, 1), aspect="auto", interpolation="nearest")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xticks([])
    ax.set_title("modes: " + ", ".join(np.array2string(np.asarray(r), precision=2) for r in mode_refs), fontsize=7)
    _save(fig, path)


def motion_panel(path, det_motion, dists, labels, modes) -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(np.abs(det_motion).mean(axis=0), label="mean |m|, deterministic")
    for v in modes:
        a.axhline(abs(v), ls="--", c="gray", lw=0.8)
    a.set_xlabel("pixel")
    a.legend(fontsize=7)
    for k in np.unique(labels):
        b.hist(dists[labels == k], 30, alpha=0.6, label=f"nearest mode {modes[k]:+g}")
    b.set_xlabel("RMS distance to nearest mode")
    b.legend(fontsize=7)
    _save(fig, path)
