"""End-to-end pruning runs: baseline training, search on a pretrained model,
search from scratch, and ablations over population size and fine-tune length.

Configuration file (YAML)::

    graph: mini-resnet            # preset, inline preset or description file
    dataset: {kind: synthetic, size: 2000, val_size: 500, seed: 1}
    seed: 0
    criterion: L1                 # L1 | L2 | GM | TE | KL | ES
    output_dir: runs/demo
    baseline: {epochs: 10, lr: 0.05, batch_size: 64, momentum: 0.9, weight_decay: 0.0005}
    sampler: {gamma: 0.5, threshold: 0.02, eta: null, population: 100, granularity: 4, min_keep: 1, max_attempts: null}
    search:
      topk: 5
      topk_epochs: 2
      final_epochs: 5
      finetune_lr: null           # null -> 0.1 x the baseline's final learning rate
      probe_size: 512             # reconstruction / calibration probe
      score_probe_size: null      # probe for data-driven criteria; null -> 256 for KL, 512 otherwise
      eval_subset_size: null      # cap on the validation split
    slim: {granularity: 4, min_keep_fraction: 0.4, epochs_initial: 20, epochs_top: 2, epochs_retrain: 20, topk: 5}

Every omitted key takes the default shown.  The worker count comes from the
``RCP_WORKERS`` environment variable only and never changes results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .criteria import CRITERIA, ProbeSet, compute_scores, select_channels
from .data import Dataset, load_dataset
from .graph import ModelGraph, build_graph, complexity
from .nn import Network
from .reconstruct import original_features, reconstruct_network
from .report import SearchReport, emit_report
from .sampler import SampleRecord, SamplerConfig, SamplingError, sample_population, select_topk
from .slimmable import SlimConfig, scratch_search
from .surgery import materialize_pruned, neighborhood_probe
from .training import TrainConfig, evaluate, train_epochs
from .utils import JsonlLog, default_workers, parallel_map, stream_rng, stream_seed

log = logging.getLogger(__name__)


@dataclass
class SearchSettings:
    topk: int = 5
    topk_epochs: int = 2
    final_epochs: int = 5
    finetune_lr: float | None = None
    probe_size: int = 512
    score_probe_size: int | None = None
    eval_subset_size: int | None = None


@dataclass
class PipelineConfig:
    graph: str = "mini-resnet"
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "size": 2000, "val_size": 500, "seed": 1})
    seed: int = 0
    criterion: str = "L1"
    output_dir: str = "runs/default"
    baseline: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(gamma=0.5, granularity=4))
    search: SearchSettings = field(default_factory=SearchSettings)
    slim: SlimConfig = field(default_factory=SlimConfig)

    def __post_init__(self):
        self.criterion = self.criterion.upper()
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion '{self.criterion}'; choose from {CRITERIA}")
        if self.search.topk < 1:
            raise ValueError("search.topk must be >= 1")
        self.baseline.seed = self.seed
        self.sampler.seed = self.seed

    @property
    def n_workers(self):
        return default_workers()

    def to_dict(self):
        d = asdict(self)
        d["baseline"].pop("seed")
        d["sampler"].pop("seed")
        # defaults derived from other fields stay null so overrides re-derive them
        if self.sampler.eta == self.sampler.gamma:
            d["sampler"]["eta"] = None
        if self.sampler.max_attempts == 200 * self.sampler.population:
            d["sampler"]["max_attempts"] = None
        d["baseline"]["milestones"] = list(self.baseline.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        sub = {"baseline": TrainConfig, "sampler": SamplerConfig, "search": SearchSettings, "slim": SlimConfig}
        kw = {}
        for k, v in d.items():
            if k in sub:
                v = dict(v or {})
                allowed = {f.name for f in fields(sub[k])} - {"seed"}
                bad = set(v) - allowed
                if bad:
                    raise ValueError(f"unknown keys in '{k}': {sorted(bad)}")
                if k == "baseline" and "milestones" in v:
                    v["milestones"] = tuple(v["milestones"])
                if k == "sampler":
                    v.setdefault("gamma", 0.5)
                    v.setdefault("granularity", 4)
                v = sub[k](**v)
            kw[k] = v
        return cls(**kw)

    def replace(self, **changes):
        """Deep copy with dotted-key overrides, e.g. ``replace(**{"sampler.population": 20})``."""
        d = self.to_dict()
        for key, value in changes.items():
            set_dotted(d, key, value)
        return PipelineConfig.from_dict(d)


def set_dotted(d, key, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return PipelineConfig.from_dict(yaml.safe_load(f))


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


# ------------------------------------------------------------------ baseline
def baseline_path(cfg: PipelineConfig):
    return Path(cfg.output_dir) / "baseline.rcpk"


def train_baseline(cfg: PipelineConfig, data: Dataset | None = None):
    """Train and checkpoint the unpruned model.  Returns (network, metrics)."""
    data = data or load_dataset(cfg.dataset)
    graph = graph_for(cfg, data)
    net = Network.initialize(graph, seed=stream_seed(cfg.seed, "init"))
    t0 = time.perf_counter()
    history = train_epochs(net, data.x_train, data.y_train, cfg.baseline)
    top1, top5 = evaluate(net, data.x_val, data.y_val)
    metrics = {"top1": top1, "top5": top5, "epochs": cfg.baseline.epochs, "final_lr": cfg.baseline.final_lr,
               "loss_history": history, "seconds": time.perf_counter() - t0}
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, baseline_path(cfg), extra=metrics)
    with JsonlLog(out / "log.jsonl") as lg:
        lg.write({"event": "baseline", "config": cfg.to_dict(), **metrics})
    log.info("baseline top-1 %.4f top-5 %.4f", top1, top5)
    return net, metrics


def graph_for(cfg: PipelineConfig, data: Dataset) -> ModelGraph:
    """Presets are sized to the dataset; description files are taken as written."""
    p = Path(cfg.graph)
    if p.suffix in (".yaml", ".yml", ".json") or p.exists():
        graph = build_graph(cfg.graph)
    else:
        graph = build_graph(cfg.graph, input_shape=data.input_shape, num_classes=data.num_classes)
    if graph.input_shape != data.input_shape or graph.num_classes != data.num_classes:
        raise ValueError(f"graph '{graph.name}' expects {graph.input_shape} -> {graph.num_classes} classes, "
                         f"dataset has {data.input_shape} -> {data.num_classes}")
    return graph


# ------------------------------------------------------------- stage 3 jobs
def _prune_and_reconstruct(ctx, cfg_counts):
    cfg = select_channels(ctx["scores"], cfg_counts, ctx["graph"])
    pruned = materialize_pruned(ctx["graph"], ctx["baseline"], cfg)
    pruned, trace = reconstruct_network(ctx["baseline"], pruned, ctx["probe"], cfg, cached_original=ctx["taps"])
    return cfg, pruned, trace


def _evaluate_chunk(args):
    ctx, items = args
    out = []
    for i, cfg_counts in items:
        try:
            cfg, pruned, trace = _prune_and_reconstruct(ctx, cfg_counts)
            top1, top5 = evaluate(pruned, ctx["x_eval"], ctx["y_eval"])
            out.append((i, cfg, top1, top5, trace, None))
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            out.append((i, cfg_counts, None, None, [], f"{type(e).__name__}: {e}"))
    return out


def _chunks(seq, n):
    n = max(1, min(n, len(seq)))
    size = -(-len(seq) // n)
    return [seq[i:i + size] for i in range(0, len(seq), size)]


class PretrainedSearch:
    """Shared state for searches on one baseline: data, probes, scores and cached evaluations.

    Stage-3 results and top-k fine-tunes are cached by draw index, so ablations
    that share seeds reuse them instead of recomputing.
    """

    def __init__(self, cfg: PipelineConfig, baseline: Network | None = None, data: Dataset | None = None,
                 baseline_metrics: dict | None = None):
        self.cfg = cfg
        self.data = data or load_dataset(cfg.dataset)
        if baseline is None:
            path = baseline_path(cfg)
            if not path.exists():
                raise FileNotFoundError(f"no baseline checkpoint at {path}; run train-baseline first")
            _, _, extra = read_checkpoint(path)
            baseline = load_checkpoint(path)
            baseline_metrics = baseline_metrics or extra
        self.baseline = baseline
        self.graph: ModelGraph = baseline.graph
        if baseline_metrics is None:
            b1, b5 = evaluate(baseline, self.data.x_val, self.data.y_val)
            baseline_metrics = {"top1": b1, "top5": b5, "epochs": cfg.baseline.epochs,
                                "final_lr": cfg.baseline.final_lr}
        self.baseline_metrics = baseline_metrics
        s = cfg.search
        d = self.data
        self.probe = ProbeSet.draw(d.x_train, d.y_train, s.probe_size, stream_seed(cfg.seed, "probe"))
        if s.eval_subset_size and s.eval_subset_size < len(d.x_val):
            rng = stream_rng(cfg.seed, "eval-subset")
            idx = np.sort(rng.choice(len(d.x_val), s.eval_subset_size, replace=False))
            self.x_eval, self.y_eval = d.x_val[idx], d.y_val[idx]
        else:
            self.x_eval, self.y_eval = d.x_val, d.y_val
        self.taps = original_features(baseline, self.probe)
        self._scores = {}
        self._proxy = {}
        self._tuned = {}

    def scores(self, criterion):
        if criterion not in self._scores:
            size = self.cfg.search.score_probe_size or (256 if criterion == "KL" else 512)
            d = self.data
            probe = ProbeSet.draw(d.x_train, d.y_train, size, stream_seed(self.cfg.seed, "score-probe"))
            self._scores[criterion] = compute_scores(self.baseline, criterion, probe)
        return self._scores[criterion]

    @property
    def finetune_lr(self):
        lr = self.cfg.search.finetune_lr
        return lr if lr is not None else 0.1 * self.baseline_metrics.get("final_lr", self.cfg.baseline.final_lr)

    def _ctx(self, criterion):
        return {"graph": self.graph, "baseline": self.baseline, "scores": self.scores(criterion),
                "probe": self.probe, "taps": self.taps, "x_eval": self.x_eval, "y_eval": self.y_eval}

    def evaluate_population(self, criterion, population, workers=1, sink=None):
        """Stage 3 for every accepted config; results in draw order."""
        key = lambda i, cfg: (criterion, i, tuple(sorted(cfg.keep_count.items())))  # noqa: E731
        todo = [(i, cfg) for i, cfg, _ in population if key(i, cfg) not in self._proxy]
        if todo:
            ctx = self._ctx(criterion)
            chunks = _chunks(todo, workers)
            results = parallel_map(_evaluate_chunk, [(ctx, c) for c in chunks], workers)
            for items, part in zip(chunks, results):
                for (i, counts), (_, cfg, top1, top5, trace, err) in zip(items, part):
                    self._proxy[key(i, counts)] = (cfg, top1, top5, trace, err)
        records = []
        for i, counts, rep in population:
            cfg, top1, top5, trace, err = self._proxy[key(i, counts)]
            rec = SampleRecord(cfg, rep, i, top1, top5)
            if err:
                rec.extra["error"] = err
            records.append(rec)
            if sink:
                sink.write({"event": "sample", "criterion": criterion, **rec.to_dict(),
                            "reconstruction": trace})
        return records

    def finetune(self, criterion, rec: SampleRecord, epochs, stream, start: Network | None = None):
        if start is None:
            _, net, _ = _prune_and_reconstruct(self._ctx(criterion), rec.config.without_indices())
        else:
            net = start.copy()
        tc = TrainConfig(epochs=epochs, lr=self.finetune_lr, batch_size=self.cfg.baseline.batch_size,
                         momentum=self.cfg.baseline.momentum, weight_decay=self.cfg.baseline.weight_decay,
                         seed=stream_seed(self.cfg.seed, stream, rec.seed_index))
        train_epochs(net, self.data.x_train, self.data.y_train, tc, stream=stream)
        return net, evaluate(net, self.x_eval, self.y_eval)

    def run(self, cfg: PipelineConfig | None = None, criterion=None, log_path=None) -> SearchReport:
        cfg = cfg or self.cfg
        criterion = (criterion or cfg.criterion).upper()
        s = cfg.search
        timings = {}
        sink = JsonlLog(log_path) if log_path else None
        try:
            t0 = time.perf_counter()
            self.scores(criterion)
            timings["scores"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            population = sample_population(self.graph, cfg.sampler, workers=cfg.n_workers)
            timings["sampling"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            records = self.evaluate_population(criterion, population, cfg.n_workers, sink)
            timings["prune_reconstruct_evaluate"] = time.perf_counter() - t0

            survivors = [r for r in records if r.proxy_accuracy is not None]
            if len(survivors) < s.topk:
                raise SamplingError(f"only {len(survivors)} samples survived stage 3; need topk={s.topk}")
            t0 = time.perf_counter()
            top = select_topk(survivors, s.topk)
            tuned = {}
            for r in top:
                key = (criterion, r.seed_index, tuple(sorted(r.config.keep_count.items())), s.topk_epochs,
                       self.finetune_lr)
                if key not in self._tuned:
                    self._tuned[key] = self.finetune(criterion, r, s.topk_epochs, "topk-finetune")
                net, (a1, a5) = self._tuned[key]
                r.extra["topk_top1"], r.extra["topk_top5"] = a1, a5
                tuned[r.seed_index] = net
            best = max(top, key=lambda r: (r.extra["topk_top1"], -r.seed_index))
            timings["topk_finetune"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            final_net, (f1, f5) = self.finetune(criterion, best, s.final_epochs, "final-finetune",
                                                start=tuned[best.seed_index])
            best.final_accuracy, best.final_top5 = f1, f5
            timings["final_finetune"] = time.perf_counter() - t0

            base = complexity(self.graph)
            report = SearchReport(
                criterion=criterion, records=records,
                baseline={**{k: self.baseline_metrics[k] for k in ("top1", "top5")},
                          "epochs": self.baseline_metrics.get("epochs", cfg.baseline.epochs),
                          "flops": base.flops, "params": base.params},
                best=best, final={"top1": f1, "top5": f5, "epochs": s.topk_epochs + s.final_epochs},
                timings=timings, config=cfg.to_dict(), graph=self.graph,
            ).check()
            c = complexity(final_net.graph)
            if c.flops != best.complexity.flops or c.params != best.complexity.params:
                raise AssertionError("materialized best model disagrees with its recorded complexity")
            report.model = final_net
            if sink:
                sink.write({"event": "search-report", **report.to_dict()})
            return report
        finally:
            if sink:
                sink.close()


def run_pretrained_pipeline(cfg: PipelineConfig, baseline: Network | None = None, data: Dataset | None = None,
                            search: PretrainedSearch | None = None, write=True) -> SearchReport:
    """Score, sample, prune + reconstruct + evaluate, fine-tune the top-k, fine-tune the best."""
    search = search or PretrainedSearch(cfg, baseline, data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = search.run(cfg, log_path=out / "log.jsonl" if write else None)
    if write:
        save_checkpoint(report.model, out / f"best-{report.criterion}.rcpk",
                        extra={"final": report.final, "keep_count": report.best.config.keep_count})
        emit_report(report, out)
    return report


def run_scratch_pipeline(cfg: PipelineConfig, data: Dataset | None = None, write=True) -> SearchReport:
    data = data or load_dataset(cfg.dataset)
    graph = graph_for(cfg, data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    net, report = scratch_search(graph, cfg.slim, cfg.sampler, data, seed=cfg.seed,
                                 log_path=out / "log.jsonl" if write else None, workers=cfg.n_workers)
    report.config = cfg.to_dict()
    report.model = net
    if write:
        save_checkpoint(net, out / "best-Scratch.rcpk", extra={"final": report.final})
        emit_report(report, out)
    return report


ABLATION_AXES = ("population", "finetune_epochs")


def ablate(cfg: PipelineConfig, axis, values=None, search: PretrainedSearch | None = None, write=True):
    """Pretrained-pipeline runs along one axis with shared baseline, scores and draws.

    ``population``: sampler population sizes (default 20, 100, 500, 1000).
    ``finetune_epochs``: multipliers of the final fine-tune length (default 1, 2, 4).
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis '{axis}'; choose from {ABLATION_AXES}")
    if values is None:
        values = (20, 100, 500, 1000) if axis == "population" else (1, 2, 4)
    search = search or PretrainedSearch(cfg)
    reports = []
    for v in values:
        if axis == "population":
            c = cfg.replace(**{"sampler.population": int(v)})
            tag = f"N={int(v)}"
        else:
            c = cfg.replace(**{"search.final_epochs": int(round(v * cfg.search.final_epochs))})
            tag = f"{v}x"
        r = search.run(c)
        r.tag = tag
        reports.append(r)
    if write:
        out = Path(cfg.output_dir) / f"ablate-{axis}"
        emit_report(reports, out)
        with JsonlLog(out / "log.jsonl") as lg:
            for r in reports:
                lg.write({"event": "ablation", "axis": axis, "tag": r.tag, **r.to_dict()})
    return reports


def probe_neighborhood(cfg: PipelineConfig, step=4, trials=20, search: PretrainedSearch | None = None):
    """Proxy accuracy of random single-unit perturbations around the best sampled config."""
    search = search or PretrainedSearch(cfg)
    report = search.run(cfg)
    ctx = search._ctx(cfg.criterion)

    def evaluator(_weights, config):
        _, net, _ = _prune_and_reconstruct(ctx, config)
        return evaluate(net, search.x_eval, search.y_eval)[0]

    results = neighborhood_probe(search.graph, search.baseline, report.best.config.without_indices(), step,
                                 trials, evaluator, seed=stream_seed(cfg.seed, "neighborhood"))
    rows = [{"keep_count": c.keep_count, "flops_ratio": complexity(search.graph, c).flops_ratio, "top1": a}
            for c, a in results]
    return report, rows
