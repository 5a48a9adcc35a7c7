"""Run-directory layout: config, log, checkpoint, results, explanations, embeddings."""

from __future__ import annotations

import json
from pathlib import Path

from gvrt.checkpoint import load_checkpoint, save_checkpoint
from gvrt.data import Vocabulary
from gvrt.evalkit.accuracy import evaluate_accuracy
from gvrt.evalkit.embeddings import export_embeddings
from gvrt.evalkit.explanations import caption_scores, generate_explanations, write_explanations
from gvrt.explainer import RewardModel
from gvrt.trainer import TrainConfig, build_model

CONFIG = "config.json"
LOG = "log.jsonl"
CHECKPOINT = "checkpoint.bin"
RESULTS = "results.json"
EXPLANATIONS = "explanations.jsonl"
EMBEDDINGS = "embeddings.tsv"


def source_label(ds, plan) -> str:
    return "+".join(ds.domain_names[d] for d in plan.source_domains)


def evaluate_plan(model, ds, plan) -> list:
    """One results cell per target domain, accuracy on that domain's test ids."""
    return [
        {"source": source_label(ds, plan), "target": ds.domain_names[t],
         "accuracy": evaluate_accuracy(model, ds, plan.test[t], t)}
        for t in plan.target_domains
    ]


def write_results(run_dir, protocol, label, seed, ds, cells, extra=None):
    obj = {"protocol": protocol, "label": label, "seed": seed, "domain_names": ds.domain_names,
           "cells": cells, "std": "population"}
    obj.update(extra or {})
    Path(run_dir, RESULTS).write_text(json.dumps(obj, indent=2))
    return obj


def save_run(run_dir, cfg: TrainConfig, result, ds, plan, label="run", exports=True):
    """Persist a finished fit. ``log.jsonl`` is expected to have been streamed by ``fit``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    Path(run_dir, CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2))
    Path(run_dir, "split.json").write_text(json.dumps(plan.to_json()))
    sidecar = {
        "config": cfg.to_dict(),
        "vocab": result.vocab.to_json() if result.vocab is not None else None,
        "num_classes": ds.num_classes,
        "image_shape": list(ds.image_shape),
        "domain_names": ds.domain_names,
        "selected_step": result.best.step,
        "val_accuracy": result.best.val_accuracy,
        "reward_model": getattr(result.model.reward_model, "meta", None),
    }
    save_checkpoint(run_dir / CHECKPOINT, result.model.state_dict(), sidecar)
    cells = evaluate_plan(result.model, ds, plan)
    extra = {"selected_step": result.best.step, "val_accuracy": result.best.val_accuracy,
             "train_seconds": result.seconds}
    keys = [(i, t) for t in plan.target_domains for i in plan.test[t]]
    if exports:
        export_embeddings(result.model, ds, keys, run_dir / EMBEDDINGS)
        if result.model.generator is not None:
            rows = generate_explanations(result.model, ds, keys, result.vocab, cfg.max_len)
            write_explanations(rows, run_dir / EXPLANATIONS)
            extra["captions"] = caption_scores(rows, ds)
    return write_results(run_dir, plan.mode, label, cfg.seed, ds, cells, extra)


def load_run(run_dir):
    """Rebuild ``(model, cfg, vocab, sidecar)`` from a run directory's checkpoint."""
    tensors, side = load_checkpoint(Path(run_dir) / CHECKPOINT)
    if side is None:
        raise FileNotFoundError(f"missing checkpoint sidecar in {run_dir}")
    cfg = TrainConfig.from_dict(side["config"])
    vocab = Vocabulary.from_json(side["vocab"]) if side.get("vocab") else None
    rm = None
    if vocab is not None:
        rm = RewardModel(len(vocab), side["num_classes"])
    model = build_model(cfg, side["num_classes"], side["image_shape"], len(vocab) if vocab else None, rm)
    model.load_state_dict(tensors)
    if rm is not None:
        rm.freeze()
    return model.eval(), cfg, vocab, side
