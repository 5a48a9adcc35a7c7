"""Report figures rendered to PNG next to the Markdown/JSON tables."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from gvrt.evalkit.report import AVG, mean_std  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _slug(s):
    return "".join(c if c.isalnum() else "_" for c in s)


def accuracy_bars(tables, path):
    targets = list(dict.fromkeys(t for tab in tables for t in tab.targets)) + [AVG]
    width = 0.8 / max(len(tables), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(targets), 2.8))
    for i, tab in enumerate(tables):
        stats = [mean_std(tab.per_seed_average() if t == AVG else tab.column(t)) for t in targets]
        means = [m for m, _ in stats]
        errs = [s or 0.0 for _, s in stats]
        ax.bar(np.arange(len(targets)) + i * width, means, width, yerr=errs, capsize=2, label=tab.label)
    ax.set_xticks(np.arange(len(targets)) + width * (len(tables) - 1) / 2)
    ax.set_xticklabels(targets)
    ax.set_ylabel("target accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_matrix(table, path):
    names = table.domain_names or sorted(set(table.sources) | set(table.targets))
    mat = np.full((len(names), len(names)), np.nan)
    for (s, t) in table.cells:
        if s in names and t in names:
            mat[names.index(s), names.index(t)] = table.mean(s, t)
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    im = ax.imshow(mat, vmin=0, vmax=100, cmap="viridis")
    for i in range(len(names)):
        for j in range(len(names)):
            if not np.isnan(mat[i, j]):
                ax.text(j, i, f"{mat[i, j]:.1f}", ha="center", va="center", color="w", fontsize=7)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names)
    ax.set_xlabel("target")
    ax.set_ylabel("source")
    ax.set_title(table.label)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def training_curves(run_dirs, path):
    """Total loss and source-validation accuracy per label, averaged over that label's runs."""
    curves = {}
    for rd in run_dirs:
        log, res = Path(rd, "log.jsonl"), Path(rd, "results.json")
        if not log.exists() or not res.exists():
            continue
        label = json.loads(res.read_text())["label"]
        recs = [json.loads(l) for l in log.read_text().splitlines() if l]
        curves.setdefault(label, []).append(recs)
    if not curves:
        return None
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
    for label, runs in curves.items():
        n = min(len(r) for r in runs)
        steps = [r["step"] for r in runs[0][:n]]
        total = np.mean([[r["total"] for r in run[:n]] for run in runs], axis=0)
        a1.plot(steps, total, lw=0.8, label=label)
        val = [(r["step"], r["val_accuracy"]) for r in runs[0] if r.get("val_accuracy") is not None]
        if val:
            vsteps = [s for s, _ in val]
            vmean = np.mean([[r["val_accuracy"] for r in run if r.get("val_accuracy") is not None][: len(vsteps)]
                             for run in runs], axis=0)
            a2.plot(vsteps, 100 * vmean, marker=".", lw=0.8, label=label)
    a1.set_xlabel("step")
    a1.set_ylabel("total loss")
    a2.set_xlabel("step")
    a2.set_ylabel("source val accuracy (%)")
    if a2.get_legend_handles_labels()[0]:
        a2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_figures(tables, run_dirs, out_dir):
    out_dir = Path(out_dir) / "figures"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with plt.rc_context(STYLE):
        if tables[0].protocol == "single-source":
            for tab in tables:
                paths.append(accuracy_matrix(tab, out_dir / f"matrix_{_slug(tab.label)}.png"))
        else:
            paths.append(accuracy_bars(tables, out_dir / "target_accuracy.png"))
        curves = training_curves(run_dirs, out_dir / "training_curves.png")
        if curves is not None:
            paths.append(curves)
    return paths
