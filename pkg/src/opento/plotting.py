"""Report figures written straight to image files.

Uses ``matplotlib.figure.Figure`` directly, so no pyplot state or
interactive backend is involved.
"""
from __future__ import annotations

import os
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure
from matplotlib.ticker import MaxNLocator

from .dataset_io import CorpusStats
from .fea import Domain
from .metrics import EvalRecord, Timing


def _save(fig: Figure, path) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def ce_histogram(records: Sequence[EvalRecord], path, bins: int = 30) -> str:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ces = np.array([r.ce for r in records if not r.failed], dtype=float)
    if ces.size:
        ax.hist(100 * ces, bins=bins, color="tab:blue", alpha=0.8)
    n_fail = sum(r.failed for r in records)
    ax.set_xlabel("compliance error [%]")
    ax.set_ylabel("problems")
    ax.set_title(f"{len(records)} problems, {n_fail} failed")
    return _save(fig, path)


def best_of_n_curve(ns: Sequence[int], median_ce: Sequence[float], failure_rate: Sequence[float], path) -> str:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.plot(ns, 100 * np.asarray(median_ce, dtype=float), "o-", label="median CE")
    ax.set_xlabel("samples per problem (N)")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_ylabel("median compliance error [%]")
    ax2 = ax.twinx()
    ax2.plot(ns, 100 * np.asarray(failure_rate, dtype=float), "s--", color="tab:red", label="failure rate")
    ax2.set_ylabel("failure rate [%]")
    return _save(fig, path)


def timing_chart(timings: Sequence[Timing], path) -> str:
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    labels = [t.mode for t in timings]
    med = [t.median for t in timings]
    err = [np.sqrt(t.variance) for t in timings]
    ax.bar(labels, med, yerr=err, color="tab:gray", capsize=4)
    ax.set_ylabel("wall time [s]")
    return _save(fig, path)


def corpus_histograms(stats: CorpusStats, path, bins: int = 20) -> str:
    fig = Figure(figsize=(10, 3.2))
    axes = fig.subplots(1, 3)
    axes[0].hist(stats.element_counts, bins=bins, range=(2**12, 2**14))
    axes[0].set_xlabel("element count")
    axes[1].hist(np.log10(stats.aspect_ratios), bins=bins, range=(-1, 1))
    axes[1].set_xlabel("log10 aspect ratio")
    axes[2].hist(stats.volume_fractions, bins=bins, range=(0, 1))
    axes[2].set_xlabel("volume fraction")
    axes[0].set_ylabel("records")
    return _save(fig, path)


def density_image(densities, domain: Domain, path, title: str = "") -> str:
    """Element densities with the y axis pointing up."""
    img = np.asarray(densities, dtype=float).reshape(domain.nx, domain.ny).T
    fig = Figure(figsize=(max(3.0, 5 * min(domain.aspect_ratio, 3)), 4))
    ax = fig.add_subplot()
    ax.imshow(img, cmap="gray_r", vmin=0, vmax=1, origin="lower", interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)
