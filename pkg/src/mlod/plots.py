"""Figures rendered from an evaluation report: ROC overlays and p-value histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluator import EvalReport  # noqa: E402

_DPI = 150


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def roc_figure(report: EvalReport, dataset: str, out_dir: str | Path) -> Path:
    """Overlay the swept ROC curves of every method for one OOD dataset."""
    if not report.curves:
        raise ValueError("report carries no curves; evaluate with want_curves=True")
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    for method, per_ds in report.curves.items():
        if dataset not in per_ds:
            continue
        curve = per_ds[dataset]
        auc = report.methods[method]["datasets"][dataset]["auroc"]
        ax.plot(curve["fpr"], curve["tpr"], linewidth=1.4,
                label=f"{method} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlabel("FPR (OOD kept)")
    ax.set_ylabel("TPR (ID kept)")
    ax.set_title(f"ROC by level sweep: {dataset}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, Path(out_dir) / f"roc_{dataset}.png")


def pvalue_histogram(p_matrix: np.ndarray, layer_names: list[str], title: str,
                     out_path: str | Path) -> Path:
    """Per-layer histograms of p-values; uniform bars mean well-calibrated ID."""
    P = np.asarray(p_matrix)
    m = P.shape[1]
    fig, axes = plt.subplots(1, m, figsize=(2.6 * m, 2.6), sharey=True, squeeze=False)
    bins = np.linspace(0.0, 1.0, 21)
    for j in range(m):
        ax = axes[0, j]
        ax.hist(P[:, j], bins=bins, color="#4878d0", edgecolor="white", linewidth=0.4)
        ax.axhline(P.shape[0] / 20.0, color="gray", linewidth=0.8, linestyle="--")
        ax.set_title(layer_names[j], fontsize=9)
        ax.set_xlabel("p")
    axes[0, 0].set_ylabel("count")
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, Path(out_path))


def render_report_figures(report: EvalReport, out_dir: str | Path,
                          p_matrices: dict[str, np.ndarray] | None = None,
                          layer_names: list[str] | None = None) -> list[Path]:
    """Write every figure the report supports; returns the file paths."""
    out_dir = Path(out_dir)
    written = []
    for dataset in report.config_echo.get("ood_datasets", []):
        if report.curves:
            written.append(roc_figure(report, dataset, out_dir))
    if p_matrices and layer_names:
        for split, P in p_matrices.items():
            written.append(pvalue_histogram(
                P, layer_names, f"per-layer p-values: {split}",
                out_dir / f"pvalues_{split}.png"))
    return written
