"""Leave-one-domain-out (multi-source) and single-source DG protocol runners."""

from __future__ import annotations

import dataclasses
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

from gvrt.data import build_split_plan
from gvrt.errors import ConfigError
from gvrt.evalkit.report import ResultsTable
from gvrt.runs import LOG, evaluate_plan, save_run, write_results
from gvrt.trainer import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclasses.dataclass
class Trial:
    cfg: TrainConfig
    mode: str
    targets: List[int]
    run_dir: Optional[str] = None
    label: str = "run"
    exports: bool = True


def run_trial(trial: Trial, ds) -> dict:
    """Split, fit, select by source validation and score the targets; failures become a marker."""
    cfg = trial.cfg
    try:
        plan = build_split_plan(ds, trial.mode, trial.targets, cfg.val_fraction, cfg.seed, cfg.test_fraction)
        log_path = None
        if trial.run_dir:
            Path(trial.run_dir).mkdir(parents=True, exist_ok=True)
            log_path = Path(trial.run_dir, LOG)
        result = fit(cfg, ds, plan, log_path=log_path)
        if trial.run_dir:
            return save_run(trial.run_dir, cfg, result, ds, plan, trial.label, trial.exports)
        return {"protocol": plan.mode, "label": trial.label, "seed": cfg.seed,
                "cells": evaluate_plan(result.model, ds, plan), "selected_step": result.best.step}
    except ConfigError:
        raise
    except Exception as exc:  # recorded per cell; the protocol keeps going
        log.error("trial %s seed=%s failed: %s", trial.targets, cfg.seed, exc)
        sources = [n for d, n in enumerate(ds.domain_names) if d not in trial.targets]
        obj = {"protocol": trial.mode, "label": trial.label, "seed": cfg.seed, "cells": [], "failed": True,
               "source": "+".join(sources),
               "targets": [ds.domain_names[t] for t in trial.targets], "error": repr(exc),
               "traceback": traceback.format_exc()}
        if trial.run_dir:
            Path(trial.run_dir).mkdir(parents=True, exist_ok=True)
            Path(trial.run_dir, "results.json").write_text(json.dumps(obj, indent=2))
        return obj


_WORKER_DS = None


def _init_worker(ds):
    global _WORKER_DS
    _WORKER_DS = ds


def _run_in_worker(trial):
    import torch

    torch.set_num_threads(1)
    return run_trial(trial, _WORKER_DS)


def run_trials(trials: Sequence[Trial], ds, workers: int = 1) -> List[dict]:
    if workers <= 1 or len(trials) <= 1:
        return [run_trial(t, ds) for t in trials]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ds,)) as pool:
        return list(pool.map(_run_in_worker, trials))


def _table(protocol, label, ds, outcomes) -> ResultsTable:
    table = ResultsTable(protocol, label, domain_names=list(ds.domain_names))
    for o in outcomes:
        if o.get("failed"):
            table.failures.append({"seed": o["seed"], "targets": o.get("targets"), "error": o.get("error")})
            for t in o.get("targets", []):
                table.add(o.get("source", "?"), t, o["seed"], None)
            continue
        for c in o["cells"]:
            table.add(c["source"], c["target"], o["seed"], c["accuracy"])
    return table


def run_multi_source(ds, cfg: TrainConfig, seeds: Sequence[int], out_dir=None, label="run",
                     workers: int = 1, exports: bool = True) -> ResultsTable:
    """Each domain in turn is the target; all others are sources (one group each)."""
    if ds.num_domains < 2:
        raise ConfigError("need at least two domains")
    trials = []
    for t in range(ds.num_domains):
        for s in seeds:
            rd = None
            if out_dir is not None:
                rd = str(Path(out_dir, label, f"target-{ds.domain_names[t]}", f"seed-{s}"))
            c = dataclasses.replace(cfg, seed=int(s), mode="multi-source", targets=[ds.domain_names[t]])
            trials.append(Trial(c, "multi-source", [t], rd, label, exports))
    return _table("multi-source", label, ds, run_trials(trials, ds, workers))


def run_single_source(ds, cfg: TrainConfig, seeds: Sequence[int], out_dir=None, label="run",
                      workers: int = 1, exports: bool = True) -> ResultsTable:
    """Train on one domain (all three groups), evaluate on every other domain."""
    if ds.num_domains < 2:
        raise ConfigError("need at least two domains")
    trials = []
    for src in range(ds.num_domains):
        targets = [d for d in range(ds.num_domains) if d != src]
        for s in seeds:
            rd = None
            if out_dir is not None:
                rd = str(Path(out_dir, label, f"source-{ds.domain_names[src]}", f"seed-{s}"))
            c = dataclasses.replace(cfg, seed=int(s), mode="single-source",
                                    targets=[ds.domain_names[t] for t in targets])
            trials.append(Trial(c, "single-source", targets, rd, label, exports))
    return _table("single-source", label, ds, run_trials(trials, ds, workers))
