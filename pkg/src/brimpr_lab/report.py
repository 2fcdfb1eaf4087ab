"""Render figures from a metrics CSV written by ``brimpr adapt --metrics``."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError("metrics file has no rows")
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}


def plot_metrics(path, out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = read_metrics(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(path).stem
    t = m["batch_idx"]
    written = []

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, m["acc_batch"], lw=0.8, alpha=0.5, label="batch")
    ax.plot(t, m["acc_cum"], lw=1.6, label="cumulative")
    ax.set_xlabel("batch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    written.append(out / f"{stem}_accuracy.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("disc_a", "disc_v", "disc_j"):
        ax.plot(t, m[key], lw=1.0, label=key)
    for key, style in (("shift_a", "--"), ("shift_v", ":")):
        for b in t[m[key] > 0]:
            ax.axvline(b, color="k", ls=style, lw=0.8)
    ax.set_xlabel("batch")
    ax.set_ylabel("Disc")
    ax.legend(loc="upper right")
    fig.tight_layout()
    written.append(out / f"{stem}_disc.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss_total", "loss_pmgfa", "loss_cmer", "loss_iicl"):
        ax.plot(t, m[key], lw=1.0, label=key[5:])
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    written.append(out / f"{stem}_losses.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written
