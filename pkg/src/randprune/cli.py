"""Command-line entry point: ``randprune <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import yaml

from .pipeline import (PipelineConfig, ablate, load_config, probe_neighborhood, run_pretrained_pipeline,
                       run_scratch_pipeline, save_config, set_dotted, train_baseline)
from .report import emit_report, load_reports

# flag -> dotted config key
OVERRIDES = {
    "graph": "graph", "seed": "seed", "criterion": "criterion", "output_dir": "output_dir",
    "dataset": "dataset.kind", "data_path": "dataset.path", "train_size": "dataset.train_size",
    "val_size": "dataset.val_size",
    "baseline_epochs": "baseline.epochs", "lr": "baseline.lr", "batch_size": "baseline.batch_size",
    "weight_decay": "baseline.weight_decay",
    "gamma": "sampler.gamma", "threshold": "sampler.threshold", "eta": "sampler.eta",
    "population": "sampler.population", "granularity": "sampler.granularity", "min_keep": "sampler.min_keep",
    "max_attempts": "sampler.max_attempts",
    "topk": "search.topk", "topk_epochs": "search.topk_epochs", "final_epochs": "search.final_epochs",
    "finetune_lr": "search.finetune_lr", "probe_size": "search.probe_size",
    "score_probe_size": "search.score_probe_size", "eval_subset_size": "search.eval_subset_size",
    "slim_epochs": "slim.epochs_initial", "slim_topk": "slim.topk", "slim_top_epochs": "slim.epochs_top",
    "retrain_epochs": "slim.epochs_retrain", "min_keep_fraction": "slim.min_keep_fraction",
}


def add_config_args(p):
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted key, e.g. search.topk=3")
    g = p.add_argument_group("overrides")
    g.add_argument("--graph")
    g.add_argument("--seed", type=int)
    g.add_argument("--criterion", choices=["L1", "L2", "GM", "TE", "KL", "ES"])
    g.add_argument("--output-dir")
    g.add_argument("--dataset", choices=["synthetic", "mnist-idx", "cifar10-bin"])
    g.add_argument("--data-path")
    g.add_argument("--train-size", type=int)
    g.add_argument("--val-size", type=int)
    g.add_argument("--baseline-epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--gamma", type=float, help="target FLOPs ratio")
    g.add_argument("--threshold", type=float, help="accepted |ratio - gamma|")
    g.add_argument("--eta", type=float, help="per-layer keep-ratio floor")
    g.add_argument("--population", type=int)
    g.add_argument("--granularity", type=int)
    g.add_argument("--min-keep", type=int)
    g.add_argument("--max-attempts", type=int)
    g.add_argument("--topk", type=int)
    g.add_argument("--topk-epochs", type=int)
    g.add_argument("--final-epochs", type=int)
    g.add_argument("--finetune-lr", type=float)
    g.add_argument("--probe-size", type=int)
    g.add_argument("--score-probe-size", type=int)
    g.add_argument("--eval-subset-size", type=int)
    g.add_argument("--slim-epochs", type=int)
    g.add_argument("--slim-topk", type=int)
    g.add_argument("--slim-top-epochs", type=int)
    g.add_argument("--retrain-epochs", type=int)
    g.add_argument("--min-keep-fraction", type=float)


def config_from_args(args) -> PipelineConfig:
    d = load_config(args.config).to_dict() if args.config else PipelineConfig().to_dict()
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            set_dotted(d, key, v)
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got '{item}'")
        k, v = item.split("=", 1)
        set_dotted(d, k.strip(), yaml.safe_load(v))
    return PipelineConfig.from_dict(d)


def cmd_train_baseline(args):
    cfg = config_from_args(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    save_config(cfg, Path(cfg.output_dir) / "config.yaml")
    _, m = train_baseline(cfg)
    print(f"baseline top-1 {100 * m['top1']:.2f}%  top-5 {100 * m['top5']:.2f}%  -> {cfg.output_dir}/baseline.rcpk")


def cmd_search_pretrained(args):
    cfg = config_from_args(args)
    criteria = [c.strip().upper() for c in args.criteria.split(",")] if args.criteria else [cfg.criterion]
    reports = []
    for c in criteria:
        reports.append(run_pretrained_pipeline(cfg.replace(criterion=c)))
    if len(reports) > 1:
        emit_report(reports, cfg.output_dir)
    print((Path(cfg.output_dir) / "report.txt").read_text(), end="")


def cmd_search_scratch(args):
    cfg = config_from_args(args)
    run_scratch_pipeline(cfg)
    print((Path(cfg.output_dir) / "report.txt").read_text(), end="")


def cmd_ablate(args):
    cfg = config_from_args(args)
    values = [float(v) if args.axis == "finetune_epochs" else int(v) for v in args.values.split(",")] \
        if args.values else None
    ablate(cfg, args.axis, values)
    print((Path(cfg.output_dir) / f"ablate-{args.axis}" / "report.txt").read_text(), end="")


def cmd_report(args):
    reports = []
    for d in args.run_dirs:
        reports.extend(load_reports(Path(d) / "report.json"))
    if not reports:
        raise SystemExit("no reports found")
    emit_report(reports, args.out)
    print((Path(args.out) / "report.txt").read_text(), end="")


def cmd_probe_neighborhood(args):
    cfg = config_from_args(args)
    _, rows = probe_neighborhood(cfg, step=args.step, trials=args.trials)
    out = Path(cfg.output_dir) / "neighborhood.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trial", "flops_ratio", "top1", "keep_count"])
        for i, r in enumerate(rows):
            w.writerow([i, f"{r['flops_ratio']:.6f}", f"{r['top1']:.6f}",
                        ";".join(f"{k}={v}" for k, v in r["keep_count"].items())])
    print(f"wrote {out}")


def build_parser():
    p = argparse.ArgumentParser(prog="randprune", description="Random channel-configuration search for pruning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-baseline", help="train and checkpoint the unpruned model")
    add_config_args(s)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("search-pretrained", help="prune a trained baseline by random configuration search")
    add_config_args(s)
    s.add_argument("--criteria", help="comma-separated list; runs one search per criterion")
    s.set_defaults(func=cmd_search_pretrained)

    s = sub.add_parser("search-scratch", help="slimmable training, direct evaluation, retrain the best")
    add_config_args(s)
    s.set_defaults(func=cmd_search_scratch)

    s = sub.add_parser("ablate", help="population-size or fine-tune-length sweep")
    add_config_args(s)
    s.add_argument("--axis", choices=["population", "finetune_epochs"], required=True)
    s.add_argument("--values", help="comma-separated axis values (defaults: 20,100,500,1000 or 1,2,4)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="merge report.json files from run directories into one table")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("probe-neighborhood", help="accuracy of single-layer perturbations of the best config")
    add_config_args(s)
    s.add_argument("--step", type=int, default=4)
    s.add_argument("--trials", type=int, default=20)
    s.set_defaults(func=cmd_probe_neighborhood)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"randprune: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
