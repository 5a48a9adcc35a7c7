"""Results tables: per-seed storage, mean/std aggregation and Markdown/JSON rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from gvrt.errors import ConfigError

AVG = "Avg"


def mean_std(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and population std; std is ``None`` for a single value."""
    vals = [v for v in values if v is not None]
    if not vals:
        return float("nan"), None
    m = sum(vals) / len(vals)
    if len(vals) == 1:
        return m, None
    return m, math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))


def format_cell(values: Sequence[float], bold=False) -> str:
    """``"62.5 $\\pm$ 0.2"`` at one decimal; a single value renders without the std."""
    m, s = mean_std(values)
    if math.isnan(m):
        return "-"
    txt = f"{m:.1f}"
    if bold:
        txt = f"**{txt}**"
    return txt if s is None else f"{txt} $\\pm$ {s:.1f}"


@dataclass
class ResultsTable:
    """Per-seed accuracies (0-100) keyed by ``(source, target)``; ``None`` marks a failed trial."""

    protocol: str
    label: str = "run"
    cells: Dict[Tuple[str, str], List[Optional[float]]] = field(default_factory=dict)
    seeds: Dict[Tuple[str, str], List[int]] = field(default_factory=dict)
    failures: List[dict] = field(default_factory=list)
    domain_names: List[str] = field(default_factory=list)

    def add(self, source, target, seed, accuracy):
        self.cells.setdefault((source, target), []).append(accuracy)
        self.seeds.setdefault((source, target), []).append(seed)

    @property
    def sources(self):
        return list(dict.fromkeys(s for s, _ in self.cells))

    @property
    def targets(self):
        order = {n: i for i, n in enumerate(self.domain_names)}
        return sorted(dict.fromkeys(t for _, t in self.cells), key=lambda t: order.get(t, len(order)))

    def mean(self, source, target) -> float:
        return mean_std(self.cells.get((source, target), []))[0]

    def std(self, source, target):
        return mean_std(self.cells.get((source, target), []))[1]

    def per_seed_average(self, source=None) -> List[float]:
        """Average over targets for each seed index (all sources pooled when ``source`` is None)."""
        by_seed: Dict[int, List[float]] = {}
        for (s, t), vals in self.cells.items():
            if source is not None and s != source:
                continue
            for seed, v in zip(self.seeds[(s, t)], vals):
                if v is not None:
                    by_seed.setdefault(seed, []).append(v)
        return [sum(v) / len(v) for _, v in sorted(by_seed.items())]

    def column(self, target) -> List[float]:
        """Per-seed values of a target column, pooled over sources (multi-source has one source per target)."""
        by_seed: Dict[int, List[float]] = {}
        for (s, t), vals in self.cells.items():
            if t == target:
                for seed, v in zip(self.seeds[(s, t)], vals):
                    if v is not None:
                        by_seed.setdefault(seed, []).append(v)
        return [sum(v) / len(v) for _, v in sorted(by_seed.items())]

    def average(self) -> float:
        return mean_std(self.per_seed_average())[0]

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "label": self.label,
            "domain_names": self.domain_names,
            "std": "population",
            "cells": [
                {"source": s, "target": t, "accuracies": v, "seeds": self.seeds[(s, t)],
                 "mean": self.mean(s, t), "std": self.std(s, t)}
                for (s, t), v in self.cells.items()
            ],
            "average": {"values": self.per_seed_average(), "mean": mean_std(self.per_seed_average())[0],
                        "std": mean_std(self.per_seed_average())[1]},
            "failures": self.failures,
        }

    @classmethod
    def from_json(cls, obj) -> "ResultsTable":
        t = cls(obj["protocol"], obj.get("label", "run"), domain_names=obj.get("domain_names", []))
        for c in obj["cells"]:
            t.cells[(c["source"], c["target"])] = list(c["accuracies"])
            t.seeds[(c["source"], c["target"])] = list(c["seeds"])
        t.failures = list(obj.get("failures", []))
        return t


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _md(rows: List[List[str]]) -> str:
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "|".join("---" for _ in rows[0]) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(out)


def render_comparison(tables: Sequence[ResultsTable]) -> str:
    """Multi-source layout: one row per label, target columns plus Avg, best mean per column in bold."""
    targets = list(dict.fromkeys(t for tab in tables for t in tab.targets))
    cols = {t: [tab.column(t) for tab in tables] for t in targets}
    cols[AVG] = [tab.per_seed_average() for tab in tables]
    best = {c: max((mean_std(v)[0] for v in vals if v), default=None) for c, vals in cols.items()}
    rows = [["Model"] + targets + [AVG]]
    for i, tab in enumerate(tables):
        row = [tab.label]
        for c in targets + [AVG]:
            vals = cols[c][i]
            row.append(format_cell(vals, bold=bool(vals) and len(tables) > 1 and mean_std(vals)[0] == best[c]))
        rows.append(row)
    return _md(rows)


def render_matrix(table: ResultsTable) -> str:
    """Single-source layout: source rows x target columns, blank diagonal, row and column averages."""
    names = table.domain_names or sorted(set(table.sources) | set(table.targets))
    rows = [[table.label] + names + [AVG]]
    col_vals: Dict[str, List[float]] = {n: [] for n in names}
    for s in names:
        row = [s]
        for t in names:
            if s == t or (s, t) not in table.cells:
                row.append("-")
            else:
                row.append(format_cell(table.cells[(s, t)]))
                col_vals[t].append(table.mean(s, t))
        avg = table.per_seed_average(s)
        row.append(format_cell(avg) if avg else "-")
        rows.append(row)
    rows.append([AVG] + [f"{sum(v) / len(v):.1f}" if v else "-" for v in col_vals.values()] + ["-"])
    return _md(rows)


def delta_table(ours: ResultsTable, baseline: ResultsTable) -> Dict[Tuple[str, str], float]:
    """Per-cell ``ours - baseline`` of the means; positive means ours is better."""
    return {k: ours.mean(*k) - baseline.mean(*k) for k in ours.cells if k in baseline.cells}


def render_delta(ours: ResultsTable, baseline: ResultsTable) -> str:
    d = delta_table(ours, baseline)
    rows = [["source", "target", "delta"]]
    rows += [[s, t, f"{v:+.1f}"] for (s, t), v in d.items()]
    return _md(rows)


# ---------------------------------------------------------------------------
# Aggregation over run directories
# ---------------------------------------------------------------------------


def tables_from_runs(run_dirs) -> List[ResultsTable]:
    """Group per-fit ``results.json`` files by label into tables (one cell entry per fit)."""
    tables: Dict[str, ResultsTable] = {}
    protocol = None
    for rd in run_dirs:
        obj = json.loads(Path(rd, "results.json").read_text())
        if protocol is None:
            protocol = obj["protocol"]
        elif obj["protocol"] != protocol:
            raise ConfigError(f"mismatched protocols: {protocol!r} vs {obj['protocol']!r} in {rd}")
        tab = tables.setdefault(obj["label"], ResultsTable(protocol, obj["label"],
                                                          domain_names=obj.get("domain_names", [])))
        if obj.get("failed"):
            tab.failures.append({"run": str(rd), "error": obj.get("error")})
        for c in obj.get("cells", []):
            tab.add(c["source"], c["target"], obj["seed"], c["accuracy"])
    return list(tables.values())


def aggregate_report(run_dirs, out_dir=None, figures=True) -> dict:
    """Mean +- std per cell over runs; writes ``report.md``/``report.json`` (+ figures) when ``out_dir`` is set."""
    run_dirs = [Path(r) for r in run_dirs]
    tables = tables_from_runs(run_dirs)
    if not tables:
        raise ConfigError("no runs to aggregate")
    protocol = tables[0].protocol
    if protocol == "single-source":
        text = "\n\n".join(render_matrix(t) for t in tables)
    else:
        text = render_comparison(tables)
    report = {"protocol": protocol, "std": "population", "tables": [t.to_json() for t in tables],
              "markdown": text}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if figures:
            from gvrt.evalkit.figures import render_figures

            report["figures"] = [str(p) for p in render_figures(tables, run_dirs, out_dir)]
        (out_dir / "report.md").write_text(f"# {protocol} results\n\n{text}\n")
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return report
