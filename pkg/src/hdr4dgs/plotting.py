"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_log(rows, path):
    """Loss terms and training PSNR against iteration."""
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(arr[:, 0], arr[:, 1], label="total")
    ax1.plot(arr[:, 0], arr[:, 2], label="ldr")
    if np.any(arr[:, 3] > 0):
        ax1.plot(arr[:, 0], arr[:, 3], label="hdr")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(arr[:, 0], arr[:, 4], color="tab:green")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train PSNR (dB)")
    _save(fig, path)


def plot_eval(rows, path):
    """Per-frame PSNR in both domains."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for domain, marker in (("ldr", "o"), ("hdr_mu", "s")):
        vals = [r[3] for r in rows if r[2] == domain]
        ax.plot(np.arange(len(vals)), vals, marker, ms=3, label=domain)
    ax.set_xlabel("test frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    _save(fig, path)


def plot_ablation(rows, axis: str, path):
    """Held-out PSNR per variant, LDR and mu-law HDR side by side."""
    labels = [str(r[1]) for r in rows]
    ldr = [r[7] for r in rows]
    hdr = [r[9] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) + 2), 3.5))
    ax.bar(x - 0.2, ldr, 0.4, label="LDR")
    ax.bar(x + 0.2, hdr, 0.4, label="HDR (mu-law)")
    ax.set_xticks(x, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("held-out PSNR (dB)")
    ax.legend()
    _save(fig, path)


def plot_bench(rows, path):
    """Median fps per thread count."""
    threads = [r["threads"] for r in rows]
    fps = [r["fps_median"] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar([str(t) for t in threads], fps)
    ax.set_xlabel("threads")
    ax.set_ylabel("median fps")
    _save(fig, path)
