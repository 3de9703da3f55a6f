"""Matplotlib figures written next to the CSV / JSON-lines reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "progretinex",
}


def _save(fig, path):
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_loss_curves(curves: dict, path) -> None:
    """One line per stage; ``curves`` maps label -> rows of (iteration, loss, lr)."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, rows in curves.items():
            it = [r[0] for r in rows]
            loss = [max(r[1], 1e-12) for r in rows]
            ax.semilogy(it, loss, label=label, lw=1.0)
        ax.set_xlabel("iteration")
        ax.set_ylabel("MSE (100-iteration mean)")
        ax.legend(ncol=2, frameon=False)
        _save(fig, path)


def plot_k_sweep(summary, path) -> None:
    """Mean PSNR and SSIM against the number of progressive iterations."""
    ks = [s["k"] for s in summary]
    with plt.rc_context(RC):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        a1.plot(ks, [s["psnr"] for s in summary], "o-", color="C0")
        a1.set_xlabel("iterations k")
        a1.set_ylabel("PSNR (dB)")
        a2.plot(ks, [s["ssim"] for s in summary], "s-", color="C1")
        a2.set_xlabel("iterations k")
        a2.set_ylabel("SSIM")
        for ax in (a1, a2):
            ax.set_xticks(ks)
        fig.tight_layout()
        _save(fig, path)


def plot_noise_ablation(summary, path) -> None:
    labels = ["NM" if s["noise"] == "nm" else f"{s['noise']:.2f}" for s in summary]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        colors = ["C3" if s["noise"] == "nm" else "C0" for s in summary]
        ax.bar(range(len(summary)), [s["psnr"] for s in summary], color=colors)
        ax.set_xticks(range(len(summary)), labels)
        ax.set_xlabel("noise level guiding the denoiser")
        ax.set_ylabel("PSNR (dB)")
        lo = min(s["psnr"] for s in summary)
        ax.set_ylim(lo - 1.0, None)
        _save(fig, path)
