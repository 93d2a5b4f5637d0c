"""Turning a channel configuration into a smaller network."""

from __future__ import annotations

import numpy as np

from .graph import ChannelConfig, ConfigError, ModelGraph, validate_config
from .nn import Network, Parameter, make_layer


def unit_indices(graph: ModelGraph, config: ChannelConfig):
    """Keep indices per unit; coupled members must agree exactly."""
    out = {}
    for u in graph.units:
        members = graph.unit_members[u]
        idx = tuple(config.keep_indices[members[0]])
        for m in members[1:]:
            if tuple(config.keep_indices[m]) != idx:
                raise ConfigError(f"coupled layers '{members[0]}' and '{m}' keep different channels")
        out[u] = idx
    return out


def _is_leading(idx):
    return idx is not None and tuple(idx) == tuple(range(len(idx)))


def _take(arr, axis, idx, share):
    if idx is None:
        return arr if share else arr.copy()
    if share:
        if not _is_leading(idx):
            raise ConfigError("weight sharing requires leading-channel indices")
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(0, len(idx))
        return arr[tuple(sl)]
    return np.take(arr, np.asarray(idx, dtype=np.intp), axis=axis)


def materialize_pruned(graph: ModelGraph, net: Network, config: ChannelConfig, share=False) -> Network:
    """Build the pruned network selected by ``config.keep_indices``.

    Conv/linear layers keep the selected output channels and the matching input
    channels of their successors; batchnorm and gate vectors are sliced alike.
    The classifier keeps all outputs.  With ``share=True`` (leading indices
    only) every parameter, gradient and running statistic is a view into
    ``net``, so updates to the sub-network land in the full network.
    """
    if config.keep_indices is None:
        raise ConfigError("materialize_pruned needs keep_indices; run select_channels first")
    validate_config(graph, config)
    per_unit = unit_indices(graph, config)
    small = graph.pruned(config)
    layers = {}
    for s in graph.layers:
        src = net.layers[s.id]
        ou = graph.channel_unit(s.id) if s.id != graph.classifier else None
        iu = graph.input_unit(s.id)
        out_idx = per_unit[ou] if ou is not None else None
        in_idx = per_unit[iu] if iu is not None else None

        def cut(name, a):
            if s.kind in ("conv2d", "linear") and name == "weight":
                return _take(_take(a, 0, out_idx, share), 1, in_idx, share)
            return _take(a, 0, out_idx, share)

        params = src.params()
        arrays = {n: cut(n, p.value) for n, p in params.items()}
        arrays.update({n: cut(n, b) for n, b in src.buffers().items()})
        layer = make_layer(small[s.id], arrays)
        if share:
            for n, p in params.items():
                setattr(layer, n, Parameter(arrays[n], cut(n, p.grad), cut(n, p.momentum_buffer)))
        if s.kind == "batchnorm2d":
            layer.eps, layer.momentum = src.eps, src.momentum
        layers[s.id] = layer
    return Network(small, layers, net.dtype)


def perturb_config(graph: ModelGraph, config: ChannelConfig, step, rng):
    """Move one randomly chosen unit by +-step channels, clamped to [1, width]."""
    unit = graph.units[int(rng.integers(len(graph.units)))]
    sign = 1 if rng.random() < 0.5 else -1
    w = graph.unit_width(unit)
    current = config.keep_count[graph.unit_members[unit][0]]
    new = int(min(max(current + sign * step, 1), w))
    counts = dict(config.keep_count)
    for m in graph.unit_members[unit]:
        counts[m] = new
    return ChannelConfig(counts), unit


def neighborhood_probe(graph: ModelGraph, weights, config: ChannelConfig, step, trials, evaluator, seed=0):
    """Accuracy of random single-unit perturbations of ``config``.

    ``evaluator(weights, config)`` returns an accuracy.  Each trial changes one
    layer or coupling group by +-``step`` channels; results feed a
    neighbourhood-accuracy plot.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        cfg, _unit = perturb_config(graph, config, step, rng)
        out.append((cfg, evaluator(weights, cfg)))
    return out
