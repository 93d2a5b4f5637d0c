"""Executable network built from a :class:`~randprune.graph.ModelGraph`."""

from __future__ import annotations

import numpy as np

from ..graph import ModelGraph
from .layers import (AddSkip, BatchNorm2d, ChannelGate, Conv2d, GlobalAvgPool, Layer, Linear,
                     MaxPool2d, ReLU, ShapeError)


def make_layer(spec, arrays: dict, bn_eps=1e-5, bn_momentum=0.1) -> Layer:
    kind = spec.kind
    if kind == "conv2d":
        return Conv2d(spec.id, arrays["weight"], arrays.get("bias"), spec.stride, spec.padding)
    if kind == "linear":
        return Linear(spec.id, arrays["weight"], arrays.get("bias"))
    if kind == "batchnorm2d":
        return BatchNorm2d(spec.id, arrays["gamma"], arrays["beta"], arrays["running_mean"],
                           arrays["running_var"], eps=bn_eps, momentum=bn_momentum)
    if kind == "channel-gate":
        return ChannelGate(spec.id, arrays["weight"])
    if kind == "relu":
        return ReLU(spec.id)
    if kind == "maxpool2d":
        return MaxPool2d(spec.id, spec.kernel[0], spec.stride)
    if kind == "avgpool-global":
        return GlobalAvgPool(spec.id)
    if kind == "add-skip":
        return AddSkip(spec.id)
    raise ValueError(f"unknown layer kind {kind}")


def init_arrays(spec, rng, dtype):
    """He-normal initialization for conv/linear, identity for batchnorm and gates."""
    c_in, c_out = spec.in_channels, spec.out_channels
    if spec.kind == "conv2d":
        kh, kw = spec.kernel
        fan_in = c_in * kh * kw
        d = {"weight": rng.normal(0, np.sqrt(2.0 / fan_in), (c_out, c_in, kh, kw))}
    elif spec.kind == "linear":
        d = {"weight": rng.normal(0, np.sqrt(2.0 / c_in), (c_out, c_in))}
    elif spec.kind == "batchnorm2d":
        d = {"gamma": np.ones(c_out), "beta": np.zeros(c_out),
             "running_mean": np.zeros(c_out), "running_var": np.ones(c_out)}
    elif spec.kind == "channel-gate":
        d = {"weight": np.ones(c_out)}
    else:
        d = {}
    if spec.kind in ("conv2d", "linear") and spec.bias:
        d["bias"] = np.zeros(c_out)
    return {k: v.astype(dtype) for k, v in d.items()}


class Network:
    """A model instance: a graph plus one layer object per node.

    ``forward`` keeps the per-layer caches needed by ``backward``; a single
    instance must not be used from several threads.
    """

    def __init__(self, graph: ModelGraph, layers: dict, dtype=np.float32):
        self.graph = graph
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self._masks = None
        self._last_consumer = {}
        for i, s in enumerate(graph.layers):
            for p in s.predecessors:
                self._last_consumer[p] = i

    @classmethod
    def initialize(cls, graph: ModelGraph, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        layers = {s.id: make_layer(s, init_arrays(s, rng, dtype)) for s in graph.layers}
        return cls(graph, layers, dtype)

    @classmethod
    def from_state(cls, graph: ModelGraph, state: dict, dtype=None):
        layers = {}
        for s in graph.layers:
            arrays = {k.split(":", 1)[1]: np.array(v, dtype=dtype or v.dtype)
                      for k, v in state.items() if k.split(":", 1)[0] == s.id}
            layers[s.id] = make_layer(s, arrays)
        any_arr = next(iter(state.values()), np.zeros(0, np.float32))
        return cls(graph, layers, dtype or any_arr.dtype)

    # ------------------------------------------------------------ execution
    def forward(self, x, training=False, masks=None, hook=None, stop_after=None, reuse=None):
        """Run the graph.

        masks:      {layer id: per-channel multiplier} applied to that layer's output.
        hook:       callable(layer_id, output) -> output, called for every node.
        stop_after: return the output of this node instead of the logits.
        reuse:      outputs of an earlier unmasked eval pass on the same ``x``;
                    nodes upstream of every mask are taken from it instead of
                    being recomputed (caches for ``backward`` are then incomplete).
        """
        x = np.asarray(x, dtype=self.dtype)
        expected = self.graph.input_shape
        if x.shape[1:] != expected:
            raise ShapeError(f"network '{self.graph.name}': expected input (N, {', '.join(map(str, expected))}),"
                             f" got {x.shape}")
        self._masks = masks
        outs = {}
        n_layers = len(self.graph.layers)
        dirty = set()
        for i, s in enumerate(self.graph.layers):
            if reuse is not None:
                if s.id not in (masks or ()) and not any(p in dirty for p in s.predecessors):
                    outs[s.id] = reuse[s.id]
                    continue
                dirty.add(s.id)
            inputs = [outs[p] for p in s.predecessors] or [x]
            y = self.layers[s.id].forward(*inputs, training=training)
            if masks is not None and s.id in masks:
                m = np.asarray(masks[s.id], dtype=self.dtype)
                y = y * (m.reshape(1, -1, 1, 1) if y.ndim == 4 else m.reshape(1, -1))
            if hook is not None:
                y = hook(s.id, y)
            if s.id == stop_after:
                return y
            outs[s.id] = y
            if hook is None and i < n_layers - 1:
                for p in s.predecessors:
                    if self._last_consumer.get(p) == i:
                        del outs[p]
        return outs[self.graph.layers[-1].id]

    __call__ = forward

    def backward(self, grad):
        """Back-propagate ``grad`` (w.r.t. the logits); returns the input gradient."""
        layers = self.graph.layers
        grads = {layers[-1].id: np.asarray(grad, dtype=self.dtype)}
        dx = None
        masks = self._masks
        for s in reversed(layers):
            g = grads.pop(s.id, None)
            if g is None:
                continue
            if masks is not None and s.id in masks:
                m = np.asarray(masks[s.id], dtype=self.dtype)
                g = g * (m.reshape(1, -1, 1, 1) if g.ndim == 4 else m.reshape(1, -1))
            gin = self.layers[s.id].backward(g)
            if not isinstance(gin, tuple):
                gin = (gin,)
            if not s.predecessors:
                dx = gin[0] if dx is None else dx + gin[0]
                continue
            for p, gi in zip(s.predecessors, gin):
                grads[p] = gi if p not in grads else grads[p] + gi
        return dx

    def predict(self, x, batch_size=256):
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.graph.num_classes), self.dtype)

    # ----------------------------------------------------------- parameters
    def named_parameters(self):
        for s in self.graph.layers:
            for k, p in self.layers[s.id].params().items():
                yield f"{s.id}:{k}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict:
        """Parameters and running statistics keyed ``<layer>:<name>`` (arrays are live)."""
        out = {}
        for s in self.graph.layers:
            layer = self.layers[s.id]
            for k, p in layer.params().items():
                out[f"{s.id}:{k}"] = p.value
            for k, b in layer.buffers().items():
                out[f"{s.id}:{k}"] = b
        return out

    def num_params(self):
        return int(sum(p.value.size for p in self.parameters()))

    def copy(self) -> "Network":
        return Network.from_state(self.graph, {k: v.copy() for k, v in self.state().items()})

    def astype(self, dtype) -> "Network":
        return Network.from_state(self.graph, self.state(), dtype=np.dtype(dtype))

    def __deepcopy__(self, memo):
        return self.copy()


def recalibrate_bn(net: Network, inputs, masks=None):
    """Reset batchnorm running statistics to the exact statistics of ``inputs``.

    One training-mode pass over the whole calibration batch; each batchnorm's
    running mean/variance become that batch's mean/variance.  Weights are not
    touched.
    """
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise ValueError("empty calibration set")
    bns = [net.layers[s.id] for s in net.graph.layers if s.kind == "batchnorm2d"]
    saved = [b.momentum for b in bns]
    try:
        for b in bns:
            b.momentum = 1.0
        net.forward(inputs, training=True, masks=masks)
    finally:
        for b, m in zip(bns, saved):
            b.momentum = m
    return net
