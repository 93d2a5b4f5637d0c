"""FLOPs-constrained random sampling of channel configurations.

Each draw picks a keep ratio per layer (coupled groups draw once) and is kept
only if the pruned network's FLOPs ratio lies within ``threshold`` of the
target ``gamma``.  Draws are indexed: draw ``i`` depends only on
``(seed, i)``, so populations of different sizes share a prefix and parallel
evaluation reproduces the serial result.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .graph import ChannelConfig, ComplexityReport, ModelGraph, complexity, config_from_units
from .utils import JsonlLog, stream_rng

log = logging.getLogger(__name__)

# |ratio - gamma| <= T is evaluated with this slack so that values exactly on the
# band edge (e.g. 0.68 vs 0.7 +- 0.02) are not rejected by rounding.
_EDGE_SLACK = 1e-12


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    gamma: float
    threshold: float = 0.02
    eta: float | None = None
    population: int = 100
    granularity: int = 1
    min_keep: int = 1
    seed: int = 0
    max_attempts: int | None = None

    def __post_init__(self):
        if self.eta is None:
            self.eta = self.gamma
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if self.threshold < 0 or self.population < 1 or self.granularity < 1 or self.min_keep < 1:
            raise ValueError("threshold >= 0, population >= 1, granularity >= 1, min_keep >= 1 required")
        if self.max_attempts is None:
            self.max_attempts = 200 * self.population


@dataclass
class SampleRecord:
    config: ChannelConfig
    complexity: ComplexityReport
    seed_index: int
    proxy_accuracy: float | None = None
    proxy_top5: float | None = None
    final_accuracy: float | None = None
    final_top5: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "seed_index": self.seed_index,
            "keep_count": dict(self.config.keep_count),
            **self.complexity.to_dict(),
            "proxy_accuracy": self.proxy_accuracy,
            "proxy_top5": self.proxy_top5,
            "final_accuracy": self.final_accuracy,
            "final_top5": self.final_top5,
        }
        d.update(self.extra)
        return d


def round_to_granularity(x, granularity):
    """Nearest multiple of ``granularity``; exact halves round up."""
    return granularity * math.floor(x / granularity + 0.5)


def keep_bounds(width, granularity, min_keep):
    lo = max(min_keep, granularity)
    return min(lo, width), width


class RatioSpace:
    """Independent keep ratios ~ U[eta, 1] per unit, rounded to the granularity."""

    def __init__(self, graph: ModelGraph, sc: SamplerConfig):
        self.graph = graph
        self.sc = sc

    def count(self, width, ratio):
        lo, hi = keep_bounds(width, self.sc.granularity, self.sc.min_keep)
        return int(min(max(round_to_granularity(ratio * width, self.sc.granularity), lo), hi))

    def draw(self, draw_index) -> ChannelConfig:
        rng = stream_rng(self.sc.seed, "sampling", draw_index)
        counts = {}
        for u in self.graph.units:
            counts[u] = self.count(self.graph.unit_width(u), rng.uniform(self.sc.eta, 1.0))
        return config_from_units(self.graph, counts)

    def extremes(self):
        """Smallest and largest configurations the space can produce."""
        lo = {u: self.count(self.graph.unit_width(u), self.sc.eta) for u in self.graph.units}
        hi = {u: self.graph.unit_width(u) for u in self.graph.units}
        return config_from_units(self.graph, lo), config_from_units(self.graph, hi)


def sample_config(graph: ModelGraph, sc: SamplerConfig, draw_index: int) -> ChannelConfig:
    return RatioSpace(graph, sc).draw(draw_index)


def gate_flops(report: ComplexityReport, sc: SamplerConfig) -> bool:
    return abs(report.flops_ratio - sc.gamma) <= sc.threshold + _EDGE_SLACK


def _evaluate_draws(args):
    space, start, stop = args
    out = []
    for i in range(start, stop):
        cfg = space.draw(i)
        out.append((i, cfg, complexity(space.graph, cfg)))
    return out


def sample_population(graph: ModelGraph, sc: SamplerConfig, space=None, log_path=None, workers=1,
                      chunk=512):
    """Rejection-sample ``sc.population`` configurations satisfying the FLOPs gate.

    Returns a list of ``(draw_index, ChannelConfig, ComplexityReport)`` in draw
    order.  Raises :class:`SamplingError` if the band is unreachable or
    ``max_attempts`` draws yield too few acceptances.
    """
    space = space or RatioSpace(graph, sc)
    small, large = space.extremes()
    r_lo, r_hi = complexity(graph, small).flops_ratio, complexity(graph, large).flops_ratio
    if r_lo > sc.gamma + sc.threshold + _EDGE_SLACK or r_hi < sc.gamma - sc.threshold - _EDGE_SLACK:
        raise SamplingError(
            f"target FLOPs band [{sc.gamma - sc.threshold:.3f}, {sc.gamma + sc.threshold:.3f}] is "
            f"unreachable: sampled ratios span [{r_lo:.3f}, {r_hi:.3f}]; lower eta/min_keep or change gamma"
        )
    sink = JsonlLog(log_path) if log_path else None
    accepted = []
    attempts = tried = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(accepted) < sc.population and attempts < sc.max_attempts:
            n_chunks = workers if pool else 1
            bounds = []
            for _ in range(n_chunks):
                stop = min(attempts + chunk, sc.max_attempts)
                if stop > attempts:
                    bounds.append((space, attempts, stop))
                attempts = stop
            results = pool.map(_evaluate_draws, bounds) if pool else map(_evaluate_draws, bounds)
            for batch in results:
                for i, cfg, rep in batch:
                    if len(accepted) >= sc.population:
                        break
                    tried = i + 1
                    ok = gate_flops(rep, sc)
                    if sink:
                        sink.write({"event": "draw", "draw_index": i, "keep_count": cfg.keep_count,
                                    "flops_ratio": rep.flops_ratio, "params_ratio": rep.params_ratio,
                                    "accepted": ok})
                    if ok:
                        accepted.append((i, cfg, rep))
    finally:
        if pool:
            pool.shutdown()
        if sink:
            sink.close()
    rate = len(accepted) / max(tried, 1)
    log.info("sampled %d/%d configurations in %d draws (acceptance %.2f%%)",
             len(accepted), sc.population, tried, 100 * rate)
    if len(accepted) < sc.population:
        raise SamplingError(
            f"only {len(accepted)} of {sc.population} samples accepted after {tried} draws "
            f"(acceptance {100 * rate:.3f}%); loosen eta or the threshold T"
        )
    return accepted


def select_topk(records, k):
    """Records with the highest proxy accuracy; ties go to the lower seed index."""
    if any(r.proxy_accuracy is None for r in records):
        raise ValueError("every record needs a proxy accuracy")
    ranked = sorted(records, key=lambda r: (-r.proxy_accuracy, r.seed_index))
    if k > len(records):
        log.warning("select_topk: k=%d exceeds %d records; returning all", k, len(records))
    return ranked[:k]
