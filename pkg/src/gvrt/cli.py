"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config key/value, missing file),
2 runtime failure (the run directory is kept, with ``diagnostics.json``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from gvrt.config import build_config, load_json, write_resolved
from gvrt.errors import ConfigError, NonFiniteLossError

log = logging.getLogger("gvrt")

WORKERS_ENV = "GVRT_WORKERS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage()}")


def _parser():
    p = _Parser(prog="gvrt", description="Text-grounded domain generalization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("gen-data", help="render the synthetic multi-domain dataset")
    common(g)

    t = sub.add_parser("train", help="fit one model on a split (mode/targets from the config)")
    common(t)
    t.add_argument("--data", required=True)

    e = sub.add_parser("eval", help="evaluate a run, or run a full DG protocol")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--run", help="trained run directory to evaluate on every domain's test pool")
    e.add_argument("--protocol", choices=["multi-source", "single-source"])
    e.add_argument("--seeds", default="0,1,2")
    e.add_argument("--label", default=None)
    e.add_argument("--workers", type=int, default=None)

    s = sub.add_parser("search", help="random hyperparameter search")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--master-seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=None)

    x = sub.add_parser("explain", help="generate textual explanations for a trained run")
    common(x, config=False)
    x.add_argument("--run", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", choices=["test", "val"], default="test")

    r = sub.add_parser("report", help="aggregate run directories into tables and figures")
    common(r, config=False)
    r.add_argument("--runs", nargs="+", required=True, help="run directories or roots containing them")
    r.add_argument("--no-figures", action="store_true")
    return p


def _workers(arg):
    n = arg if arg is not None else int(os.environ.get(WORKERS_ENV, "1"))
    cap = os.environ.get(WORKERS_ENV)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def _train_cfg(args):
    from gvrt.trainer import TrainConfig

    values = load_json(args.config) if args.config else {}
    return build_config(TrainConfig, values, args.overrides, section="train")


def _load_data(path):
    from gvrt.data import load_dataset

    if not Path(path, "meta.json").exists():
        raise ConfigError(f"dataset directory not found or incomplete: {path}")
    return load_dataset(path)


def cmd_gen_data(args):
    from gvrt.data import SynthSpec, generate_synthetic_dataset, save_dataset

    values = load_json(args.config) if args.config else {}
    spec = build_config(SynthSpec, values, args.overrides, section="synth")
    write_resolved(spec, args.out)
    ds = generate_synthetic_dataset(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes x {ds.num_domains} domains) to {args.out}")


def cmd_train(args):
    from gvrt.data import build_split_plan
    from gvrt.runs import LOG, save_run
    from gvrt.trainer import fit

    cfg = _train_cfg(args)
    ds = _load_data(args.data)
    out = Path(args.out)
    write_resolved(cfg, out)
    plan = build_split_plan(ds, cfg.mode, cfg.targets, cfg.val_fraction, cfg.seed, cfg.test_fraction)
    result = fit(cfg, ds, plan, log_path=out / LOG)
    res = save_run(out, cfg, result, ds, plan, label=cfg.encoder_mode)
    for c in res["cells"]:
        print(f"{c['source']} -> {c['target']}: {c['accuracy']:.1f}")
    print(f"selected step {result.best.step} (source val acc {100 * (result.best.val_accuracy or 0):.1f})")


def cmd_eval(args):
    from gvrt.evalkit.report import aggregate_report

    ds = _load_data(args.data)
    out = Path(args.out)
    if args.run:
        from gvrt.data import SplitPlan
        from gvrt.evalkit.accuracy import evaluate_accuracy
        from gvrt.runs import load_run

        model, cfg, _, _ = load_run(args.run)
        write_resolved(cfg, out)
        plan = SplitPlan.from_json(json.loads(Path(args.run, "split.json").read_text()))
        pool = sorted({i for ids in plan.test.values() for i in ids})
        accs = {ds.domain_names[d]: evaluate_accuracy(model, ds, pool, d) for d in range(ds.num_domains)}
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps({"run": str(args.run), "accuracy": accs}, indent=2))
        for name, a in accs.items():
            tag = " (source)" if ds.domain_names.index(name) in plan.source_domains else ""
            print(f"{name}{tag}: {a:.1f}")
        return
    if not args.protocol:
        raise ConfigError("eval needs --run or --protocol")
    from gvrt.evalkit.protocols import run_multi_source, run_single_source

    cfg = _train_cfg(args)
    write_resolved(cfg, out)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    label = args.label or cfg.encoder_mode
    runner = run_multi_source if args.protocol == "multi-source" else run_single_source
    table = runner(ds, cfg, seeds, out_dir=out, label=label, workers=_workers(args.workers))
    (out / f"results_{label}.json").write_text(json.dumps(table.to_json(), indent=2))
    report = aggregate_report(_find_runs([out / label]), out)
    print(report["markdown"])


def cmd_search(args):
    from gvrt.evalkit.protocols import Trial, run_trials
    from gvrt.evalkit.report import aggregate_report, tables_from_runs
    from gvrt.trainer import apply_draw, sample_hyperparameters

    cfg = _train_cfg(args)
    ds = _load_data(args.data)
    out = Path(args.out)
    write_resolved(cfg, out)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    draws = sample_hyperparameters(args.master_seed, args.n)
    (out / "draws.json").write_text(json.dumps([dataclasses.asdict(d) for d in draws], indent=2))
    from gvrt.data import resolve_domains

    targets = resolve_domains(ds, cfg.targets)
    if cfg.mode == "single-source":
        targets = [d for d in range(ds.num_domains) if d not in targets] if len(targets) == 1 else targets
    trials = []
    for i, draw in enumerate(draws):
        for s in range(args.seeds):
            c = dataclasses.replace(apply_draw(cfg, draw), seed=cfg.seed + s)
            trials.append(Trial(c, cfg.mode, targets, str(out / f"hp-{i:02d}" / f"seed-{s}"), f"hp-{i:02d}"))
    outcomes = run_trials(trials, ds, _workers(args.workers))
    failed = sum(1 for o in outcomes if o.get("failed"))
    run_dirs = [Path(t.run_dir) for t in trials]
    report = aggregate_report(run_dirs, out)
    val = {}
    for o in outcomes:
        if not o.get("failed") and o.get("val_accuracy") is not None:
            val.setdefault(o["label"], []).append(o["val_accuracy"])
    best = max(val, key=lambda k: sum(val[k]) / len(val[k])) if val else None
    summary = {"n": args.n, "seeds": args.seeds, "runs": len(trials), "failed": failed, "best_by_source_val": best}
    (out / "search.json").write_text(json.dumps(summary, indent=2))
    print(report["markdown"])
    print(json.dumps(summary))


def cmd_explain(args):
    from gvrt.data import SplitPlan
    from gvrt.evalkit.explanations import caption_scores, generate_explanations, write_explanations
    from gvrt.runs import load_run

    model, cfg, vocab, _ = load_run(args.run)
    if model.generator is None:
        raise ConfigError(f"run {args.run} has no explanation generator (encoder_mode={cfg.encoder_mode})")
    ds = _load_data(args.data)
    plan = SplitPlan.from_json(json.loads(Path(args.run, "split.json").read_text()))
    if args.split == "test":
        keys = [(i, t) for t in plan.target_domains for i in plan.test[t]]
    else:
        keys = [(i, d) for d in plan.source_domains for i in plan.val[d]]
    out = Path(args.out)
    write_resolved(cfg, out)
    rows = generate_explanations(model, ds, keys, vocab, cfg.max_len)
    write_explanations(rows, out / "explanations.jsonl")
    scores = caption_scores(rows, ds)
    (out / "caption_scores.json").write_text(json.dumps(scores, indent=2))
    print(f"BLEU-4 {scores['bleu4']:.1f}  ROUGE_L {scores['rouge_l']:.1f}  ({len(rows)} explanations)")


def _find_runs(paths):
    found = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise ConfigError(f"run path not found: {p}")
        if (p / "results.json").exists():
            found.append(p)
        else:
            found += sorted(q.parent for q in p.rglob("results.json"))
    return found


def cmd_report(args):
    from gvrt.evalkit.report import aggregate_report

    runs = _find_runs(args.runs)
    if not runs:
        raise ConfigError("no run directories (with results.json) found")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps({"runs": [str(r) for r in runs]}, indent=2))
    report = aggregate_report(runs, out, figures=not args.no_figures)
    print(report["markdown"])


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "search": cmd_search,
    "explain": cmd_explain,
    "report": cmd_report,
}


def cli_main(argv=None) -> int:
    out_dir = None
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out_dir = Path(args.out)
        COMMANDS[args.command](args)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        _diagnostics(out_dir, {"error": str(exc), "snapshot": exc.snapshot})
        return 2
    except Exception as exc:
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        _diagnostics(out_dir, {"error": repr(exc), "traceback": traceback.format_exc()})
        return 2


def _diagnostics(out_dir, obj):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "diagnostics.json").write_text(json.dumps(obj, indent=2, default=str))
    print(f"run directory kept for inspection: {out_dir}", file=sys.stderr)


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
