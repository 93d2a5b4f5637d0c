"""Pruning from scratch with a weight-shared (slimmable) network.

A sub-network keeps the leading channels of every prunable layer, so its
parameters are views into the full model.  Training runs the full network on
the labels and three random widths against the full network's soft outputs,
accumulating all four gradients before one update.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .graph import ChannelConfig, ModelGraph, complexity
from .nn import Network, NonFiniteGradient, loss_cross_entropy, loss_distill, recalibrate_bn, sgd_step, softmax
from .report import SearchReport
from .sampler import SampleRecord, SamplerConfig, sample_population
from .surgery import materialize_pruned
from .training import TrainConfig, batch_order, evaluate, train_epochs
from .utils import JsonlLog, parallel_map, stream_rng, stream_seed

log = logging.getLogger(__name__)


@dataclass
class SlimConfig:
    granularity: int = 4
    min_keep_fraction: float = 0.4
    subnets_per_step: int = 4
    distill_temperature: float = 1.0
    epochs_initial: int = 20
    epochs_top: int = 2
    epochs_retrain: int = 20
    topk: int = 5
    lr: float = 0.05
    lr_top: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.subnets_per_step != 4:
            raise ValueError("subnets_per_step is fixed at 4 (full network + 3 random widths)")
        if not 0 < self.min_keep_fraction <= 1:
            raise ValueError("min_keep_fraction must lie in (0, 1]")
        if self.granularity < 1 or self.distill_temperature <= 0:
            raise ValueError("granularity >= 1 and distill_temperature > 0 required")


def permitted_widths(width, granularity, min_keep_fraction):
    """Multiples of ``granularity`` from ceil(f * width), rounded up, to ``width``.

    The full width is always permitted, even when it is not a multiple.
    """
    lo = math.ceil(round(min_keep_fraction * width, 9))
    lo = granularity * math.ceil(lo / granularity)
    widths = list(range(lo, width + 1, granularity))
    if not widths or widths[-1] != width:
        widths.append(width)
    return widths


class SlimSpace:
    """Uniform draws over the permitted widths of each unit; usable by ``sample_population``."""

    def __init__(self, graph: ModelGraph, sc: SlimConfig, seed=0):
        self.graph = graph
        self.sc = sc
        self.seed = seed
        self.widths = {u: permitted_widths(graph.unit_width(u), sc.granularity, sc.min_keep_fraction)
                       for u in graph.units}

    def from_rng(self, rng) -> ChannelConfig:
        counts = {u: ws[int(rng.integers(len(ws)))] for u, ws in self.widths.items()}
        return ChannelConfig.leading({l: counts[self.graph.unit_of[l]] for l in self.graph.prunable})

    def draw(self, draw_index) -> ChannelConfig:
        return self.from_rng(stream_rng(self.seed, "sampling", draw_index))

    def extremes(self):
        lo = {l: self.widths[self.graph.unit_of[l]][0] for l in self.graph.prunable}
        return ChannelConfig.leading(lo), ChannelConfig.full(self.graph, with_indices=True)


def sample_subnet(graph: ModelGraph, sc: SlimConfig, rng) -> ChannelConfig:
    return SlimSpace(graph, sc).from_rng(rng)


class SlimModel:
    """Full-width parameters plus the currently active leading-channel config."""

    def __init__(self, graph: ModelGraph, net: Network | None = None, seed=0):
        self.graph = graph
        self.net = net if net is not None else Network.initialize(graph, seed=seed)
        self.active_config = ChannelConfig.full(graph, with_indices=True)

    def subnet(self, config: ChannelConfig | None = None) -> Network:
        """Network over views of the shared parameters (no copy)."""
        config = config or self.active_config
        if config.keep_indices is None:
            config = ChannelConfig.leading(config.keep_count)
        return materialize_pruned(self.graph, self.net, config, share=True)

    def standalone(self, config: ChannelConfig) -> Network:
        if config.keep_indices is None:
            config = ChannelConfig.leading(config.keep_count)
        return materialize_pruned(self.graph, self.net, config, share=False)

    def set_active(self, config: ChannelConfig):
        self.active_config = config if config.keep_indices is not None else ChannelConfig.leading(config.keep_count)
        return self


def accumulate_gradients(model: SlimModel, xb, yb, configs, temperature=1.0):
    """Forward/backward for the full network and each sub-network in ``configs``.

    Gradients accumulate into the shared parameters; nothing is updated.
    Returns (cross-entropy loss, [distillation losses]).
    """
    full = model.net
    logits = full.forward(xb, training=True)
    ce, grad = loss_cross_entropy(logits, yb)
    full.backward(grad)
    soft = softmax(logits.astype(np.float64), temperature)
    kd = []
    for cfg in configs:
        sub = model.subnet(cfg)
        out = sub.forward(xb, training=True)
        loss, g = loss_distill(out, soft, temperature)
        sub.backward(g)
        kd.append(loss)
    return ce, kd


def parallel_train_step(model: SlimModel, xb, yb, sc: SlimConfig, rng, lr):
    """One update from the full network plus three random sub-networks."""
    configs = [sample_subnet(model.graph, sc, rng) for _ in range(sc.subnets_per_step - 1)]
    ce, kd = accumulate_gradients(model, xb, yb, configs, sc.distill_temperature)
    out = {"ce": ce, "kd": kd, "skipped": False}
    if not (np.isfinite(ce) and np.all(np.isfinite(kd))):
        model.net.zero_grad()
        out["skipped"] = True
        return out
    try:
        sgd_step(model.net.parameters(), lr, sc.momentum, sc.weight_decay)
    except NonFiniteGradient:
        model.net.zero_grad()
        out["skipped"] = True
    return out


def train_slimmable(model: SlimModel, x, y, sc: SlimConfig, epochs=None, seed=0, on_epoch=None):
    epochs = sc.epochs_initial if epochs is None else epochs
    tc = TrainConfig(epochs=epochs, lr=sc.lr, batch_size=sc.batch_size)
    skipped = 0
    history = []
    for epoch in range(epochs):
        lr = tc.lr_at(epoch)
        order = batch_order(seed, epoch, len(x), "slim-data-order")
        ces = []
        for step, i in enumerate(range(0, len(x), sc.batch_size)):
            idx = order[i:i + sc.batch_size]
            rng = stream_rng(seed, "slim-subnets", epoch, step)
            r = parallel_train_step(model, x[idx], y[idx], sc, rng, lr)
            skipped += r["skipped"]
            ces.append(r["ce"])
        history.append(float(np.mean(ces)))
        log.debug("slim epoch %d lr %.4g ce %.4f", epoch, lr, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    if skipped:
        log.warning("%d slimmable steps skipped on non-finite loss", skipped)
    return history


def bn_recalibrate(model: SlimModel, config: ChannelConfig, calibration) -> Network:
    """Recompute batchnorm statistics of the shared model at ``config``'s widths."""
    inputs = calibration.inputs if hasattr(calibration, "inputs") else np.asarray(calibration)
    if len(inputs) == 0:
        raise ValueError("empty calibration set")
    sub = model.subnet(config)
    recalibrate_bn(sub, inputs)
    return sub


def direct_evaluate(model: SlimModel, config: ChannelConfig, calibration, x, y):
    """Accuracy of a sub-network evaluated straight from the shared weights.

    Works on a copy, so the shared running statistics are left untouched.
    """
    sub = model.standalone(config)
    recalibrate_bn(sub, calibration.inputs if hasattr(calibration, "inputs") else calibration)
    return evaluate(sub, x, y)


def _direct_job(args):
    model, cfg, calib, x, y = args
    return direct_evaluate(model, cfg, calib, x, y)


def _brief_job(args):
    model, cfg, x_tr, y_tr, x_va, y_va, tc = args
    net = model.standalone(cfg)
    train_epochs(net, x_tr, y_tr, tc, stream="topk-data-order")
    return evaluate(net, x_va, y_va)


def scratch_search(graph: ModelGraph, sc: SlimConfig, sampler: SamplerConfig, data, model: SlimModel | None = None,
                   calibration=None, seed=0, log_path=None, workers=1):
    """Sample, evaluate directly, briefly train the top-k, retrain the best from scratch.

    ``data`` is a :class:`~randprune.data.Dataset`.  Returns (retrained best
    network, :class:`SearchReport`).
    """
    timings = {}
    t0 = time.perf_counter()
    if model is None:
        model = SlimModel(graph, seed=stream_seed(seed, "init"))
        train_slimmable(model, data.x_train, data.y_train, sc, seed=seed)
    timings["train_slimmable"] = time.perf_counter() - t0
    if calibration is None:
        rng = stream_rng(seed, "calibration")
        idx = np.sort(rng.choice(len(data.x_train), size=min(512, len(data.x_train)), replace=False))
        calibration = data.x_train[idx]

    t0 = time.perf_counter()
    space = SlimSpace(graph, sc, seed=sampler.seed)
    population = sample_population(graph, sampler, space=space, log_path=log_path, workers=workers)
    accs = parallel_map(_direct_job, [(model, cfg, calibration, data.x_val, data.y_val)
                                      for _, cfg, _ in population], workers)
    records = [SampleRecord(cfg, rep, i, a[0], a[1]) for (i, cfg, rep), a in zip(population, accs)]
    timings["sample_evaluate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    k = min(sc.topk, len(records))
    top = sorted(records, key=lambda r: (-r.proxy_accuracy, r.seed_index))[:k]
    tc = TrainConfig(epochs=sc.epochs_top, lr=sc.lr_top, batch_size=sc.batch_size, momentum=sc.momentum,
                     weight_decay=sc.weight_decay, seed=seed)
    brief = parallel_map(_brief_job, [(model, r.config, data.x_train, data.y_train, data.x_val, data.y_val, tc)
                                      for r in top], workers)
    for r, (a1, a5) in zip(top, brief):
        r.extra["brief_top1"], r.extra["brief_top5"] = a1, a5
    best = max(top, key=lambda r: (r.extra["brief_top1"], -r.seed_index))
    timings["brief_train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    net = Network.initialize(graph.pruned(best.config), seed=stream_seed(seed, "init-retrain"))
    tc_final = TrainConfig(epochs=sc.epochs_retrain, lr=sc.lr, batch_size=sc.batch_size, momentum=sc.momentum,
                           weight_decay=sc.weight_decay, seed=seed)
    train_epochs(net, data.x_train, data.y_train, tc_final, stream="retrain-data-order")
    best.final_accuracy, best.final_top5 = evaluate(net, data.x_val, data.y_val)
    timings["retrain"] = time.perf_counter() - t0

    full = SlimModel(graph, model.net).standalone(ChannelConfig.full(graph, with_indices=True))
    recalibrate_bn(full, calibration)
    b1, b5 = evaluate(full, data.x_val, data.y_val)
    c = complexity(graph)
    report = SearchReport(
        criterion="Scratch", tag="Scratch", records=records,
        baseline={"top1": b1, "top5": b5, "flops": c.flops, "params": c.params, "epochs": sc.epochs_initial},
        best=best,
        final={"top1": best.final_accuracy, "top5": best.final_top5, "epochs": sc.epochs_retrain},
        timings=timings, config={"slim": asdict(sc), "sampler": asdict(sampler), "seed": seed}, graph=graph,
    ).check()
    if log_path:
        with JsonlLog(log_path) as lg:
            lg.write({"event": "search-report", **report.to_dict()})
    return net, report
