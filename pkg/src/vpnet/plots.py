"""Matplotlib renderings of the CSV artifacts written by the CLI.

Imported lazily by the CLI so the numerical core never needs matplotlib.
Figures use the Agg backend and are saved without timestamps, so the same
data always produces byte-identical PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
DPI = 100


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def condition_surface(rows, path, title: str | None = None) -> Path:
    """Heat map of log10 cond over the (tau, lambda) mesh; infinite values drawn at the top of the scale."""
    taus = sorted({r[0] for r in rows})
    lams = sorted({r[1] for r in rows})
    ti = {t: i for i, t in enumerate(taus)}
    li = {v: j for j, v in enumerate(lams)}
    z = np.full((len(lams), len(taus)), np.nan)
    for tau, lam, cond in rows:
        z[li[lam], ti[tau]] = np.log10(cond) if np.isfinite(cond) else np.inf
    finite = z[np.isfinite(z)]
    top = max(float(finite.max()) if finite.size else 1.0, 1.0)
    z[np.isinf(z)] = top
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(taus) > 1 and len(lams) > 1:
        mesh = ax.pcolormesh(taus, lams, z, shading="nearest", cmap="viridis", vmin=0.0, vmax=top)
        fig.colorbar(mesh, ax=ax, label="log10 cond")
    else:
        ax.scatter([r[0] for r in rows], [r[1] for r in rows], c=z.ravel(), cmap="viridis")
    ax.set_xlabel("tau")
    ax.set_ylabel("lambda")
    ax.set_title(title or "Condition number of the sampled basis")
    fig.tight_layout()
    return _save(fig, path)


def training_curves(report, path, title: str | None = None) -> Path:
    epochs = np.arange(1, report.epochs_run + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, report.train_loss, color="C0")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, report.train_acc, label="train", color="C0")
    ax2.plot(epochs, report.test_acc, label="test", color="C1")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.legend(loc="lower right")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def accuracy_vs_parameters(results, path, min_accuracy: float | None = None) -> Path:
    """Scatter of test accuracy against learnable parameters, one color per architecture."""
    fig, ax = plt.subplots(figsize=(6, 4))
    archs = sorted({r.arch for r in results})
    for i, arch in enumerate(archs):
        pts = [(r.n_params, r.test_accuracy) for r in results if r.arch == arch and not r.diverged]
        if pts:
            x, y = zip(*pts)
            ax.scatter(x, y, label=arch, color=f"C{i}", s=18)
    if min_accuracy is not None:
        ax.axhline(min_accuracy, color="0.5", linestyle="--", linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("learnable parameters")
    ax.set_ylabel("test accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def reconstructions(signals, recon, indices, path) -> Path:
    """Original (solid) and VP-layer reconstruction (dashed) per inspected sample."""
    k = len(indices)
    fig, axes = plt.subplots(k, 1, figsize=(6, 1.8 * k + 0.6), squeeze=False)
    for ax, x, r, idx in zip(axes[:, 0], signals, recon, indices):
        ax.plot(x, color="C0", label="signal")
        ax.plot(r, color="C1", linestyle="--", label="projection")
        ax.set_ylabel(f"#{idx}")
    axes[0, 0].legend(loc="upper right", fontsize="small")
    axes[-1, 0].set_xlabel("sample")
    fig.tight_layout()
    return _save(fig, path)


def class_examples(dataset, path, per_class: int = 3) -> Path:
    """The first few signals of every class."""
    fig, axes = plt.subplots(1, dataset.class_count, figsize=(3 * dataset.class_count, 2.8), squeeze=False)
    for k, ax in enumerate(axes[0]):
        rows = np.flatnonzero(dataset.labels == k)[:per_class]
        for j, row in enumerate(rows):
            ax.plot(dataset.signals[row], color=f"C{j}", linewidth=1)
        ax.set_title(f"class {k}")
        ax.set_xlabel("sample")
    fig.tight_layout()
    return _save(fig, path)
