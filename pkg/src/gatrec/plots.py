"""Report figures: ranking metrics against K, and per-fold loss curves."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

from .evaluator import MetricsReport

METRICS = ("precision", "recall", "ndcg", "map")
LABELS = {"precision": "Precision@K", "recall": "Recall@K", "ndcg": "NDCG@K", "map": "MAP@K"}

STYLE = {
    "font.size": 8,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}


def _new(nrows=1, ncols=1, width=6.4, aspect=1.6):
    fig = Figure(figsize=(width, width / aspect))
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata, so reruns write identical files
    fig.savefig(path, dpi=150, metadata={"Software": None})
    return path


def plot_metrics_at_k(reports: Mapping[str, MetricsReport], path) -> Path:
    """One panel per metric; one line per report (typically the all / cold-start mean reports)."""
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig, axes = _new(2, 2, width=6.4, aspect=1.3)
        for ax, metric in zip(axes.flat, METRICS):
            for label, rep in reports.items():
                ks = [k for k, m in rep.at_k.items() if m is not None]
                if not ks:
                    continue
                ax.plot(ks, [getattr(rep.at_k[k], metric) for k in ks], marker="o", label=label)
            ax.set_xlabel("K")
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
            ax.set_title(LABELS[metric])
            ax.set_ylim(0, 1.02)
            ax.grid(alpha=0.3, linewidth=0.4)
        if axes[0, 0].get_legend_handles_labels()[0]:
            axes[0, 0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_training_curves(histories: Mapping[str, Sequence], path) -> Path:
    """``histories`` maps a run label to its ``EpochRecord`` list."""
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig, axes = _new(1, 2, width=7.0, aspect=2.4)
        for label, hist in histories.items():
            epochs = [r.epoch for r in hist]
            line, = axes[0, 0].plot(epochs, [r.train_loss for r in hist], label=label)
            axes[0, 0].plot(epochs, [r.val_loss for r in hist], linestyle="--", color=line.get_color())
            axes[0, 1].step(epochs, [r.lr for r in hist], where="post", color=line.get_color())
        axes[0, 0].set_xlabel("epoch")
        axes[0, 0].set_ylabel("loss (solid: train, dashed: validation)")
        axes[0, 1].set_xlabel("epoch")
        axes[0, 1].set_ylabel("learning rate")
        axes[0, 1].set_yscale("log")
        for ax in axes.flat:
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        if histories:
            axes[0, 0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
