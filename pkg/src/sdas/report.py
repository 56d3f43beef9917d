"""Figures written next to the delimited outputs of a run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def search_figures(rows, out_dir, schedule: str = "") -> list[Path]:
    """Discretization progress and loss curves of a search, one PNG each."""
    out = Path(out_dir)
    it = [r["iteration"] for r in rows]
    paths = []

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.step(it, [r["M_t"] for r in rows], where="post")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("discretizations performed")
    ax0.set_title(f"schedule {schedule}".strip())
    ax1.semilogy(it, [max(r["reachable_count"], 1) for r in rows])
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("reachable architectures")
    fig.tight_layout()
    paths.append(out / "discretization.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.plot(it, [r["train_loss"] for r in rows], label="train")
    ax0.plot(it, [r["val_loss"] for r in rows], label="val")
    ax0.set_xlabel("iteration")
    ax0.set_ylabel("cross-entropy")
    ax0.legend()
    ax1.plot(it, [r["forward_macs"] for r in rows])
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("multiply-adds per sample")
    fig.tight_layout()
    paths.append(out / "losses.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    return paths


def training_figure(losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(range(1, len(losses) + 1), losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
