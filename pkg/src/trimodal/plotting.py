"""Figures written next to the plain-text reports."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.4, 3.6),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
})

_LOG_LINE = re.compile(r"step=(\d+) dir=(\w+) loss=([-\d.eE+]+) lr=")


def parse_metrics_log(lines: Sequence[str]) -> dict[str, tuple[list[int], list[float]]]:
    curves: dict[str, tuple[list[int], list[float]]] = {}
    for line in lines:
        m = _LOG_LINE.match(line)
        if m:
            xs, ys = curves.setdefault(m.group(2), ([], []))
            xs.append(int(m.group(1)))
            ys.append(float(m.group(3)))
    return curves


def loss_curves(lines: Sequence[str], path: str | Path, title: str = "training loss") -> Path:
    curves = parse_metrics_log(lines)
    fig, ax = plt.subplots()
    for name, (xs, ys) in sorted(curves.items()):
        ax.plot(xs, ys, label=name, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("mean token NLL (nats)")
    ax.set_title(title)
    if curves:
        ax.legend(ncol=3, frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def grouped_bars(groups: Sequence[str], series: dict[str, Sequence[float]], path: str | Path,
                 ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots()
    width = 0.8 / max(len(series), 1)
    for j, (label, vals) in enumerate(series.items()):
        xs = [i + (j - (len(series) - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, vals, width=width, label=label)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def headline(scores: dict) -> float:
    """The single score shown per direction in bar charts."""
    for key in ("bleu4", "token_acc"):
        if key in scores:
            return scores[key]
    return 0.0


def sweep_plot(sizes: Sequence[int], wer: Sequence[float], bleu: Sequence[float], path: str | Path) -> Path:
    fig, ax = plt.subplots()
    ax.plot(sizes, wer, "o-", label="WER (speech to text)")
    ax.plot(sizes, bleu, "s-", label="BLEU-4 (image to speech)")
    ax.set_xscale("log")
    ax.set_xticks(list(sizes))
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("speech vocabulary size")
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
