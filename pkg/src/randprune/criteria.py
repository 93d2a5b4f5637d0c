"""Channel importance criteria.

All scores follow one convention: a smaller score means the channel is pruned
first.  Scores are computed per prunable layer and, for layers tied by skip
connections, combined with :func:`aggregate_coupled` so every member of a
coupling group ranks its channels identically.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .graph import ChannelConfig, ModelGraph
from .nn import Network, kl_rows, loss_cross_entropy, softmax
from .nn.layers import im2col

log = logging.getLogger(__name__)

CRITERIA = ("L1", "L2", "GM", "TE", "KL", "ES")
SUM_AGGREGATED = ("L1", "L2", "GM", "TE")


@dataclass
class ImportanceScores:
    criterion: str
    per_layer: dict
    flags: dict = field(default_factory=dict)
    convention: str = "smaller-prunes-first"

    def save(self, path):
        with open(path, "w") as f:
            json.dump({
                "criterion": self.criterion,
                "convention": self.convention,
                "flags": self.flags,
                "per_layer": {k: [float(v) for v in vec] for k, vec in self.per_layer.items()},
            }, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(d["criterion"], {k: np.asarray(v) for k, v in d["per_layer"].items()}, d.get("flags", {}))


@dataclass
class ProbeSet:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("probe set must hold at least one sample")
        if len(self.inputs) != len(self.labels):
            raise ValueError("probe inputs and labels differ in length")

    @property
    def size(self):
        return len(self.inputs)

    @classmethod
    def draw(cls, x, y, size, seed):
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(x), size=min(size, len(x)), replace=False))
        return cls(x[idx], y[idx])

    def batches(self, batch_size):
        for i in range(0, self.size, batch_size):
            yield self.inputs[i:i + batch_size], self.labels[i:i + batch_size]


def _weights(net: Network, layer_id):
    w = net.layers[layer_id].weight.value
    return w.reshape(w.shape[0], -1).astype(np.float64)


# ------------------------------------------------------------------ weight-only
def score_norm(net: Network, p=1) -> ImportanceScores:
    """Per-filter L1 or L2 norm."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    per = {}
    for l in net.graph.prunable:
        w = _weights(net, l)
        per[l] = np.abs(w).sum(axis=1) if p == 1 else np.sqrt((w * w).sum(axis=1))
    return ImportanceScores(f"L{p}", per)


def score_gm(net: Network) -> ImportanceScores:
    """Sum of Euclidean distances from each filter to the other filters of its layer.

    Filters close to all the others (near the geometric median) are the most
    replaceable and score lowest.
    """
    per = {}
    for l in net.graph.prunable:
        w = _weights(net, l)
        per[l] = cdist(w, w).sum(axis=1)
    return ImportanceScores("GM", per)


# --------------------------------------------------------------- data-driven
def instrument_gates(net: Network) -> Network:
    """Copy of ``net`` with all-ones channel gates after every prunable layer's batchnorm."""
    gated = net.graph.with_gates()
    if gated is net.graph:
        return net
    state = {k: v.copy() for k, v in net.state().items()}
    for s in gated.layers:
        if s.kind == "channel-gate":
            state[f"{s.id}:weight"] = np.ones(s.out_channels, dtype=net.dtype)
    return Network.from_state(gated, state, dtype=net.dtype)


def score_taylor(net: Network, probe: ProbeSet, batch_size=64) -> ImportanceScores:
    """Squared gate gradient, averaged over probe mini-batches.

    With unit gates the gate gradient of a channel equals the sum over its
    weights of gradient times weight, so this is the first-order Taylor
    estimate of the loss change caused by removing the channel.
    """
    graph = net.graph
    gates = {l: graph.gate_of(l) for l in graph.prunable}
    missing = [l for l, g in gates.items() if g is None]
    if missing:
        raise ValueError(f"network lacks channel gates for {missing}; instrument it with instrument_gates()")
    acc = {l: np.zeros(graph[l].out_channels) for l in graph.prunable}
    n_batches = 0
    for x, y in probe.batches(batch_size):
        net.zero_grad()
        _, g = loss_cross_entropy(net.forward(x, training=False), y)
        net.backward(g)
        for l, gid in gates.items():
            acc[l] += net.layers[gid].weight.grad.astype(np.float64) ** 2
        n_batches += 1
    net.zero_grad()
    return ImportanceScores("TE", {l: v / n_batches for l, v in acc.items()})


def mask_points(graph: ModelGraph, layer_id):
    """Node whose output is zeroed to mask ``layer_id``'s channels.

    Follows the layer's single-consumer chain through batchnorm, gates and
    skip additions up to the first relu (the post-activation feature map).
    """
    node = layer_id
    while True:
        cons = graph.consumers[node]
        if len(cons) != 1:
            return node
        nxt = graph[cons[0]]
        if nxt.kind == "relu":
            return nxt.id
        if nxt.kind not in ("batchnorm2d", "channel-gate", "add-skip"):
            return node
        node = nxt.id


def unit_mask_points(graph: ModelGraph, unit):
    return tuple(dict.fromkeys(mask_points(graph, m) for m in graph.unit_members[unit]))


def score_kl(net: Network, probe: ProbeSet, batch_size=128, shared_group_mask=True) -> ImportanceScores:
    """KL(P || Q_i) between intact and channel-masked output distributions.

    One masked forward pass per channel; nodes upstream of the mask are reused
    from the intact pass.  Coupled layers share one mask (all their mask
    points are zeroed together) and so receive identical scores.
    """
    graph = net.graph
    if shared_group_mask:
        jobs = [(graph.unit_members[u], unit_mask_points(graph, u)) for u in graph.units]
    else:
        jobs = [((l,), (mask_points(graph, l),)) for l in graph.prunable]
    sums = {members: np.zeros(graph[members[0]].out_channels) for members, _ in jobs}
    for x, _ in probe.batches(batch_size):
        cache = {}
        logits = net.forward(x, hook=lambda i, y: cache.setdefault(i, y))
        p = softmax(logits.astype(np.float64))
        for members, points in jobs:
            width = graph[members[0]].out_channels
            for c in range(width):
                m = np.ones(width, dtype=net.dtype)
                m[c] = 0
                q = softmax(net.forward(x, masks={pt: m for pt in points}, reuse=cache).astype(np.float64))
                sums[members][c] += kl_rows(p, q).sum()
    per = {}
    for members, _ in jobs:
        for l in members:
            per[l] = sums[members] / probe.size
    return ImportanceScores("KL", per)


def successors(graph: ModelGraph, layer_id):
    """Conv/linear layers that read ``layer_id``'s channels (through channel-wise nodes)."""
    out, stack, seen = [], [layer_id], set()
    while stack:
        node = stack.pop()
        for c in graph.consumers[node]:
            if c in seen:
                continue
            seen.add(c)
            if graph[c].kind in ("conv2d", "linear"):
                out.append(c)
            else:
                stack.append(c)
    return sorted(out, key=[s.id for s in graph.layers].index)


def _sensitivity(layer, a, chunk_elems=1 << 22):
    """Max over samples and output units of each input channel's share of |pre-activation| mass."""
    w = layer.weight.value.astype(np.float64)
    if a.ndim == 2:
        terms = lambda rows: np.abs(rows[:, None, :] * w[None, :, :])  # noqa: E731
        rows = a.astype(np.float64)
    else:
        o, c, kh, kw = w.shape
        cols, _, _ = im2col(a.astype(np.float64), kh, kw, layer.stride, layer.padding)
        rows = cols.reshape(-1, c, kh * kw)
        wk = w.reshape(o, c, kh * kw)
        terms = lambda r: np.abs(np.einsum("pck,ock->poc", r, wk))  # noqa: E731
    o, c = w.shape[0], w.shape[1]
    step = max(1, chunk_elems // (o * c))
    best = np.zeros(c)
    for i in range(0, len(rows), step):
        t = terms(rows[i:i + step])
        ratio = t / np.maximum(t.sum(axis=2, keepdims=True), 1e-12)
        best = np.maximum(best, ratio.max(axis=(0, 1)))
    return best


def score_es(net: Network, probe: ProbeSet, batch_size=128) -> ImportanceScores:
    """Empirical sensitivity of each channel on the next layer's pre-activations.

    For channel i and next-layer unit u the contribution is
    |sum over the receptive field of w * a_i|; the sensitivity is the largest
    fraction contribution_i / sum_k contribution_k seen over the probe set
    (and over all successor layers).
    """
    graph = net.graph
    succ = {l: successors(graph, l) for l in graph.prunable}
    needed = {graph[s].predecessors[0] for ss in succ.values() for s in ss}
    per = {l: np.zeros(graph[l].out_channels) for l in graph.prunable}
    flags = {}
    for x, _ in probe.batches(batch_size):
        taps = {}
        net.forward(x, hook=lambda i, y: taps.setdefault(i, y) if i in needed else y)
        for l, ss in succ.items():
            for s in ss:
                per[l] = np.maximum(per[l], _sensitivity(net.layers[s], taps[graph[s].predecessors[0]]))
    for l, ss in succ.items():
        if not ss:
            per[l] = np.sqrt((_weights(net, l) ** 2).sum(axis=1))
            flags[l] = "no successor layer; scored by L2 norm"
            log.warning("ES: layer %s has no successor, falling back to L2", l)
    return ImportanceScores("ES", per, flags)


# ------------------------------------------------------------------ combining
def aggregate_coupled(scores: ImportanceScores, groups) -> ImportanceScores:
    """Combine the scores of layers tied by skip connections.

    L1/L2/GM/TE are summed, ES takes the element-wise maximum, KL is left as is
    (its masks are already shared).  Every member gets the combined vector.
    """
    per = {k: np.asarray(v, dtype=np.float64).copy() for k, v in scores.per_layer.items()}
    for g in groups:
        members = g.members if hasattr(g, "members") else tuple(g)
        missing = [m for m in members if m not in per]
        if missing:
            raise ValueError(f"group members {missing} have no scores")
        widths = {len(per[m]) for m in members}
        if len(widths) != 1:
            raise ValueError(f"group {members} has mismatched widths {sorted(widths)}")
        vecs = np.stack([per[m] for m in members])
        if scores.criterion == "KL":
            continue
        combined = vecs.max(axis=0) if scores.criterion == "ES" else vecs.sum(axis=0)
        for m in members:
            per[m] = combined.copy()
    return ImportanceScores(scores.criterion, per, dict(scores.flags), scores.convention)


def top_channels(vec, k):
    """Indices of the ``k`` largest scores (lower index wins ties), ascending."""
    vec = np.asarray(vec)
    order = np.lexsort((np.arange(len(vec)), -vec))
    return tuple(int(i) for i in np.sort(order[:k]))


def select_channels(scores: ImportanceScores, config: ChannelConfig, graph: ModelGraph | None = None):
    """Attach keep indices: each layer keeps its ``keep_count`` highest-scoring channels.

    With ``graph`` given, coupled layers are ranked by the group's vector (the
    first member's, which :func:`aggregate_coupled` makes identical across the
    group) so they keep identical indices.
    """
    idx = {}
    if graph is not None:
        for u in graph.units:
            members = graph.unit_members[u]
            keep = top_channels(scores.per_layer[members[0]], config.keep_count[members[0]])
            for m in members:
                idx[m] = keep
    else:
        for l, k in config.keep_count.items():
            idx[l] = top_channels(scores.per_layer[l], k)
    return ChannelConfig(dict(config.keep_count), idx)


def compute_scores(net: Network, criterion: str, probe: ProbeSet | None = None, aggregate=True) -> ImportanceScores:
    """Score every prunable layer of ``net`` with ``criterion`` and combine coupled layers."""
    criterion = criterion.upper()
    if criterion in ("TE", "KL", "ES") and probe is None:
        raise ValueError(f"criterion {criterion} needs a probe set")
    if criterion == "L1":
        s = score_norm(net, 1)
    elif criterion == "L2":
        s = score_norm(net, 2)
    elif criterion == "GM":
        s = score_gm(net)
    elif criterion == "TE":
        s = score_taylor(instrument_gates(net), probe)
    elif criterion == "KL":
        s = score_kl(net, probe)
    elif criterion == "ES":
        s = score_es(net, probe)
    else:
        raise ValueError(f"unknown criterion '{criterion}'; choose from {CRITERIA}")
    return aggregate_coupled(s, net.graph.groups) if aggregate else s
