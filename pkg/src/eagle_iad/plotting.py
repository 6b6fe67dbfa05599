"""Report figures. Everything renders through the Agg canvas, never pyplot."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "normal": "#3b75af",
    "abnormal": "#c0392b",
    "train": "#7f7f7f",
    "band": "#f5b041",
}
# fixed metadata keeps reruns byte-identical
_PNG_META = {"Software": None}


def _figure(width=6.0, height=3.6):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    return path


def score_histogram(
    train_scores: Sequence[float],
    test_scores: Mapping[str, Sequence[float]],
    tau: float,
    s_max: float,
    path,
) -> Path:
    """Training scores against test scores split by label, with tau and the low-confidence band."""
    fig = _figure()
    ax = fig.add_subplot(111)
    pools = [np.asarray(train_scores, float)] + [np.asarray(v, float) for v in test_scores.values()]
    everything = np.concatenate([p for p in pools if p.size] or [np.zeros(1)])
    bins = np.linspace(everything.min(), max(everything.max(), s_max, tau), 40)
    ax.hist(train_scores, bins=bins, color=STYLE["train"], alpha=0.6, label="train (unsampled)")
    for label, vals in test_scores.items():
        if len(vals):
            ax.hist(vals, bins=bins, histtype="step", lw=1.6, color=STYLE.get(label, None), label=f"test {label}")
    if s_max >= tau:
        ax.axvspan(tau, s_max, color=STYLE["band"], alpha=0.25, label="low confidence")
    ax.axvline(tau, color="k", ls="--", lw=1, label=r"$\tau$")
    ax.set_xlabel("image score")
    ax.set_ylabel("count")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def sampling_ratio(sampled: Sequence[int], total: Sequence[int], path) -> Path:
    sampled = np.asarray(sampled, float)
    total = np.asarray(total, float)
    frac = np.divide(sampled, total, out=np.zeros_like(sampled), where=total > 0)
    overall = sampled.sum() / max(total.sum(), 1.0)
    fig = _figure()
    ax = fig.add_subplot(111)
    ax.bar(np.arange(len(frac)), frac, width=1.0, color=STYLE["normal"])
    ax.axhline(overall, color="k", lw=1, ls="--", label=f"overall {overall:.3f}")
    ax.set_xlabel("training image")
    ax.set_ylabel("fraction of patches in bank")
    ax.set_ylim(0, max(frac.max(initial=0) * 1.15, overall * 1.5, 0.05))
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def layer_dynamics(curves: Mapping[str, np.ndarray], layer_range: tuple[int, int] | None, path) -> Path:
    """Probability of the correct answer per layer, one line per condition."""
    fig = _figure()
    ax = fig.add_subplot(111)
    for name, p in curves.items():
        p = np.asarray(p)
        ax.plot(np.arange(1, len(p) + 1), p, marker="o", ms=3, lw=1.4, label=name)
    if layer_range is not None:
        ax.axvspan(layer_range[0] - 0.5, layer_range[1] + 0.5, color=STYLE["band"], alpha=0.2)
    ax.axhline(0.5, color="k", lw=0.8, ls=":")
    ax.set_xlabel("layer")
    ax.set_ylabel("P(correct)")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def attention_ratio(groups: Mapping[str, np.ndarray], path) -> Path:
    """Mean attention ratio per layer with a one-std band for each group of runs."""
    fig = _figure()
    ax = fig.add_subplot(111)
    for name, ar in groups.items():
        ar = np.atleast_2d(np.asarray(ar))
        if ar.size == 0:
            continue
        layers = np.arange(1, ar.shape[1] + 1)
        m, s = ar.mean(axis=0), ar.std(axis=0)
        ax.plot(layers, m, lw=1.5, label=f"{name} (n={ar.shape[0]})")
        ax.fill_between(layers, m - s, m + s, alpha=0.15)
    ax.set_ylim(0, 1)
    ax.set_xlabel("layer")
    ax.set_ylabel("attention ratio")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def alpha_sweep(alphas: Sequence[float], rates: Sequence[float], path, highlight: float | None = 0.6) -> Path:
    fig = _figure(4.5, 3.2)
    ax = fig.add_subplot(111)
    ax.plot(alphas, rates, marker="o", color=STYLE["normal"])
    if highlight is not None and highlight in list(alphas):
        ax.plot([highlight], [rates[list(alphas).index(highlight)]], "o", color=STYLE["abnormal"], ms=8)
    ax.set_xlabel(r"$\alpha$")
    ax.set_ylabel("correct under misleading prior")
    return _save(fig, path)
