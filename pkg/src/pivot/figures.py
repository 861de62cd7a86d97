"""Matplotlib figure rendering for the report paths. All figures are written
to files next to their delimited outputs; nothing is shown interactively."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import pretrain as pt


def render_training_curves(series: "pt.MetricSeries", path) -> None:
    epochs = [r.epoch for r in series.records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [r.loss_step for r in series.records], label="step loss")
    ax1.plot(epochs, [r.loss_path for r in series.records], label="path loss")
    ax1.plot(epochs, [r.loss_joint for r in series.records], label="joint loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax2.plot(epochs, [r.step_acc for r in series.records], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out step accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_stop_analysis(series: "pt.MetricSeries", analysis: "pt.StopAnalysis",
                         path) -> None:
    values = series.accuracies()
    epochs = np.arange(1, len(values) + 1)
    coeffs = np.asarray(analysis.coefficients)
    t = (epochs - analysis.domain_offset) / analysis.domain_scale
    fitted = np.polynomial.polynomial.polyval(t, coeffs)
    deriv = pt.eval_poly_derivative(
        coeffs, epochs, analysis.domain_offset, analysis.domain_scale
    )
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, values, ".", ms=2, alpha=0.4, label="measured accuracy")
    ax.plot(epochs, fitted, color="tab:blue", label="polynomial fit")
    ax.axvline(analysis.e_star, color="black", ls="--",
               label=f"derivative argmax ({analysis.e_star})")
    ax.axvline(analysis.saturation_epoch, color="gray", ls=":",
               label=f"saturation ({analysis.saturation_epoch})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("step accuracy")
    ax2 = ax.twinx()
    ax2.plot(epochs, deriv, color="tab:red", lw=1, label="fit derivative")
    ax2.set_ylabel("accuracy derivative", color="tab:red")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_table(rows: list[dict], path) -> None:
    """Grouped bars of SF/SR/TR accuracy per run."""
    runs = [r["run"] for r in rows]
    tasks = ["SF", "SR", "TR"]
    x = np.arange(len(runs))
    width = 0.25
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(runs)), 4))
    for i, task in enumerate(tasks):
        vals = [r.get(task) if r.get(task) is not None else 0.0 for r in rows]
        ax.bar(x + (i - 1) * width, vals, width, label=task)
    ax.set_xticks(x)
    ax.set_xticklabels(runs, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
