#!/usr/bin/env python3
"""Render the CSV outputs of `espark baselines` / `espark train` as PNG figures.

    python scripts/plot_results.py runs/baselines

Needs matplotlib, which the package itself does not depend on.
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_comparison(path: Path, out: Path) -> None:
    rows = read(path)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.barh([r["method"] for r in rows], [float(r["profit"]) for r in rows])
    ax.set_xlabel("test profit")
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_heatmap(path: Path, out: Path) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=float)
    freq = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(6, max(2, 0.3 * len(freq))))
    im = ax.imshow(freq, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_ylabel("agent")
    ax.set_xlabel("order multiplier")
    fig.colorbar(im, ax=ax, label="frequency")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def plot_scores(paths: list[Path], out: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for p in paths:
        rows = read(p)
        ax.plot([int(r["step"]) for r in rows], [float(r["score"]) for r in rows], label=p.stem)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("checkpoint profit")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    args = ap.parse_args()
    d = args.run_dir
    if (d / "comparison.csv").exists():
        plot_comparison(d / "comparison.csv", d / "comparison.png")
    for p in sorted(d.glob("heatmap_*.csv")):
        plot_heatmap(p, p.with_suffix(".png"))
    scores = sorted(d.glob("scores*.csv"))
    if scores:
        plot_scores(scores, d / "scores.png")
    print(f"figures written to {d}")


if __name__ == "__main__":
    main()
