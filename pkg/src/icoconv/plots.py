"""Figure rendering for convergence reports (headless, writes PNG files)."""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__


def _atomic_savefig(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        # fixed metadata keeps byte-identical output across runs
        fig.savefig(tmp, format="png", dpi=120, metadata={"Software": f"icoconv {__version__}"})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def plot_report(report, path: str) -> None:
    """Log-scale error curve for a ConvergenceReport, saved as PNG."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.semilogy(report.axis, report.max_err, "o-", label="max error")
    ax.semilogy(report.axis, report.mean_err, "s--", label="mean error")
    for k, r in enumerate(report.ratios, start=1):
        ax.annotate(
            f"/{r:.2f}",
            (report.axis[k], report.max_err[k]),
            textcoords="offset points",
            xytext=(4, 4),
            fontsize=8,
        )
    ax.set_xlabel(report.axis_name)
    ax.set_ylabel("absolute error")
    ax.set_title(f"{report.quantity}  (log2 slope {report.slope:.2f})", fontsize=10)
    if report.axis_name == "n":
        ax.set_xscale("log", base=2)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _atomic_savefig(fig, path)


def plot_training_curves(epochs, losses, accuracies, path: str) -> None:
    """Loss and accuracy per epoch on twin axes, saved as PNG."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.plot(epochs, losses, "o-", color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(epochs, accuracies, "s--", color="tab:orange", label="accuracy")
    ax2.set_ylabel("accuracy", color="tab:orange")
    ax2.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _atomic_savefig(fig, path)
