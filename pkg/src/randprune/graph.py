"""Architecture descriptions, channel configurations and complexity accounting.

A :class:`ModelGraph` is a topologically ordered list of :class:`LayerSpec`
nodes.  Convolution and hidden linear layers are *prunable*: their output
channels can be removed.  Layers whose outputs meet at an ``add-skip`` node are
tied into a :class:`CouplingGroup` and always keep the same channels.

Description file schema (YAML or JSON)::

    name: tiny-net            # optional
    input_shape: [3, 16, 16]  # (C, H, W) for images or (F,) for vectors
    num_classes: 10
    layers:
      - {id: c1, kind: conv2d, out_channels: 8, kernel: 3, padding: 1}
      - {id: b1, kind: batchnorm2d}
      - {id: r1, kind: relu}
      - {id: c2, kind: conv2d, out_channels: 8, kernel: 3, padding: 1}
      - {id: b2, kind: batchnorm2d}
      - {id: add, kind: add-skip, predecessors: [b2, r1]}
      - {id: r2, kind: relu}
      - {id: pool, kind: avgpool-global}
      - {id: fc, kind: linear, out_channels: 10, bias: true}

``predecessors`` defaults to the previous layer (the network input for the
first layer; ``input`` names it explicitly).  Channel counts of
non-parametric layers are inferred.  Optional keys: ``stride``, ``padding``,
``kernel`` (int or pair), ``bias``.  The last layer must be a linear
classifier with ``num_classes`` outputs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import yaml

KINDS = (
    "conv2d", "batchnorm2d", "relu", "maxpool2d", "avgpool-global",
    "linear", "add-skip", "channel-gate",
)
PARAMETRIC = ("conv2d", "linear")
CHANNELWISE = ("batchnorm2d", "relu", "maxpool2d", "avgpool-global", "add-skip", "channel-gate")
INPUT = "input"


class GraphError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    bias: bool = False
    predecessors: tuple = ()
    coupling_group: str | None = None

    def describe(self):
        d = {"id": self.id, "kind": self.kind}
        if self.kind in PARAMETRIC:
            d["out_channels"] = self.out_channels
            d["bias"] = self.bias
        if self.kind in ("conv2d", "maxpool2d"):
            d["kernel"] = list(self.kernel)
            d["stride"] = self.stride
        if self.kind == "conv2d":
            d["padding"] = self.padding
        d["predecessors"] = list(self.predecessors) or [INPUT]
        return d


@dataclass(frozen=True)
class CouplingGroup:
    id: str
    members: tuple


@dataclass(frozen=True)
class ChannelConfig:
    """Retained output-channel counts (and optionally indices) per prunable layer."""

    keep_count: dict
    keep_indices: dict | None = None

    @classmethod
    def full(cls, graph: "ModelGraph", with_indices=False):
        counts = {l: graph[l].out_channels for l in graph.prunable}
        idx = {l: tuple(range(c)) for l, c in counts.items()} if with_indices else None
        return cls(counts, idx)

    @classmethod
    def leading(cls, keep_count):
        """Config retaining the lowest-index channels of every layer."""
        return cls(dict(keep_count), {l: tuple(range(c)) for l, c in keep_count.items()})

    def without_indices(self):
        return ChannelConfig(dict(self.keep_count))

    def to_dict(self):
        d = {"keep_count": dict(self.keep_count)}
        if self.keep_indices is not None:
            d["keep_indices"] = {k: list(v) for k, v in self.keep_indices.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        idx = d.get("keep_indices")
        return cls({k: int(v) for k, v in d["keep_count"].items()},
                   {k: tuple(v) for k, v in idx.items()} if idx is not None else None)


@dataclass(frozen=True)
class ComplexityReport:
    flops: int
    params: int
    flops_ratio: float
    params_ratio: float
    flops_by_kind: dict = field(default_factory=dict)

    def to_dict(self):
        return {"flops": self.flops, "params": self.params,
                "flops_ratio": self.flops_ratio, "params_ratio": self.params_ratio}


def _pair(v):
    if isinstance(v, (list, tuple)):
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


class ModelGraph:
    """Validated, immutable architecture description."""

    def __init__(self, layers, input_shape, num_classes, name="custom"):
        self.name = name
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self._build(list(layers))

    # ------------------------------------------------------------------ build
    def _build(self, layers):
        if not layers:
            raise GraphError("graph has no layers")
        seen = {}
        shapes = {}  # id -> output shape without batch axis
        sources = {}  # id -> prunable layer whose channel indexing the output follows
        uf = _UnionFind()
        resolved = []
        for spec in layers:
            if spec.kind not in KINDS:
                raise GraphError(f"layer '{spec.id}': unknown kind '{spec.kind}'")
            if spec.id in seen or spec.id == INPUT:
                raise GraphError(f"layer '{spec.id}': duplicate or reserved id")
            for p in spec.predecessors:
                if p not in seen:
                    raise GraphError(f"layer '{spec.id}': predecessor '{p}' is not defined earlier")
            preds = spec.predecessors
            if (spec.kind == "add-skip") != (len(preds) == 2) or len(preds) > 2:
                n_in = 2 if spec.kind == "add-skip" else 1
                raise GraphError(f"layer '{spec.id}': expects {n_in} predecessor(s), got {len(preds)}")
            in_shapes = [shapes[p] for p in preds] or [self.input_shape]
            in_src = [sources[p] for p in preds] or [None]
            x = in_shapes[0]
            c_in = x[0]
            kind = spec.kind
            if kind == "conv2d":
                if len(x) != 3:
                    raise GraphError(f"layer '{spec.id}': conv2d needs a (C, H, W) input, got {x}")
                if spec.in_channels and spec.in_channels != c_in:
                    raise GraphError(f"layer '{spec.id}': in_channels {spec.in_channels} != incoming {c_in}")
                if spec.out_channels < 1:
                    raise GraphError(f"layer '{spec.id}': out_channels must be >= 1")
                kh, kw = spec.kernel
                ho = (x[1] + 2 * spec.padding - kh) // spec.stride + 1
                wo = (x[2] + 2 * spec.padding - kw) // spec.stride + 1
                if ho < 1 or wo < 1:
                    raise GraphError(f"layer '{spec.id}': output spatial size collapses to {ho}x{wo}")
                out = (spec.out_channels, ho, wo)
                src = spec.id
            elif kind == "linear":
                if len(x) != 1:
                    raise GraphError(f"layer '{spec.id}': linear needs a flat (F,) input, got {x}; "
                                     "insert avgpool-global first")
                if spec.in_channels and spec.in_channels != c_in:
                    raise GraphError(f"layer '{spec.id}': in_channels {spec.in_channels} != incoming {c_in}")
                if spec.out_channels < 1:
                    raise GraphError(f"layer '{spec.id}': out_channels must be >= 1")
                out = (spec.out_channels,)
                src = spec.id
            elif kind == "add-skip":
                a, b = in_shapes
                if a != b:
                    raise GraphError(f"layer '{spec.id}': add-skip operands differ: {a} vs {b} "
                                     f"(from {preds[0]}, {preds[1]})")
                out = a
                sa, sb = in_src
                if sa is not None and sb is not None:
                    uf.union(sa, sb)
                elif (sa is None) != (sb is None):
                    raise GraphError(f"layer '{spec.id}': cannot add a raw network input to a prunable path")
                src = sa
            elif kind == "maxpool2d":
                if len(x) != 3:
                    raise GraphError(f"layer '{spec.id}': maxpool2d needs (C, H, W), got {x}")
                k = spec.kernel[0]
                s = spec.stride
                out = (c_in, (x[1] - k) // s + 1, (x[2] - k) // s + 1)
                src = in_src[0]
            elif kind == "avgpool-global":
                if len(x) != 3:
                    raise GraphError(f"layer '{spec.id}': avgpool-global needs (C, H, W), got {x}")
                out = (c_in,)
                src = in_src[0]
            else:  # batchnorm2d, relu, channel-gate
                out = x
                src = in_src[0]
            c_out = out[0]
            spec = replace(spec, in_channels=c_in, out_channels=c_out, predecessors=tuple(preds))
            seen[spec.id] = spec
            shapes[spec.id] = out
            sources[spec.id] = src
            resolved.append(spec)

        last = resolved[-1]
        if last.kind != "linear" or last.out_channels != self.num_classes:
            raise GraphError(f"last layer '{last.id}' must be a linear classifier with "
                             f"{self.num_classes} outputs")
        self.classifier = last.id
        prunable = [s.id for s in resolved if s.kind in PARAMETRIC and s.id != last.id]
        comps = {}
        for l in prunable:
            comps.setdefault(uf.find(l), []).append(l)
        groups = []
        group_of = {}
        for members in comps.values():
            if len(members) > 1:
                widths = {seen[m].out_channels for m in members}
                if len(widths) != 1:
                    raise GraphError(f"coupled layers {members} have unequal widths {sorted(widths)}")
                gid = f"group{len(groups)}"
                groups.append(CouplingGroup(gid, tuple(members)))
                for m in members:
                    group_of[m] = gid
        # groups ordered by first member; specs carry their group id
        resolved = [replace(s, coupling_group=group_of.get(s.id)) for s in resolved]
        self.layers = tuple(resolved)
        self._by_id = {s.id: s for s in resolved}
        self.shapes = shapes
        self.sources = {k: (uf.find(v) if v is not None else None) for k, v in sources.items()}
        self.prunable = tuple(prunable)
        self.groups = tuple(groups)
        self.group_of = group_of
        # root (union-find representative) -> canonical unit id
        units = []
        unit_members = {}
        root_to_unit = {}
        for l in prunable:
            root = uf.find(l)
            if root in root_to_unit:
                continue
            uid = group_of.get(l, l)
            root_to_unit[root] = uid
            units.append(uid)
            unit_members[uid] = tuple(m for m in prunable if uf.find(m) == root)
        self.units = tuple(units)
        self.unit_members = unit_members
        self.unit_of = {m: u for u, ms in unit_members.items() for m in ms}
        self._root_to_unit = root_to_unit
        self.consumers = {s.id: [] for s in resolved}
        for s in resolved:
            for p in s.predecessors:
                self.consumers[p].append(s.id)

    # ------------------------------------------------------------- accessors
    def __getitem__(self, layer_id) -> LayerSpec:
        return self._by_id[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self._by_id

    def __iter__(self):
        return iter(self.layers)

    @property
    def n(self):
        """Number of prunable layers."""
        return len(self.prunable)

    def unit_width(self, unit):
        return self[self.unit_members[unit][0]].out_channels

    def channel_unit(self, layer_id):
        """Unit (group or layer) that indexes the output channels of ``layer_id``."""
        root = self.sources[layer_id]
        return None if root is None else self._root_to_unit.get(root)

    def input_unit(self, layer_id):
        """Unit indexing the input channels of ``layer_id`` (None for the raw input)."""
        preds = self[layer_id].predecessors
        return self.channel_unit(preds[0]) if preds else None

    @cached_property
    def _flop_terms(self):
        """Per-layer (kind, out_unit, in_unit, coefficients) used by :func:`complexity`."""
        terms = []
        for s in self.layers:
            ou = self.channel_unit(s.id) if s.id != self.classifier else None
            iu = self.input_unit(s.id)
            shape = self.shapes[s.id]
            area = shape[1] * shape[2] if len(shape) == 3 else 1
            in_shape = self.shapes[s.predecessors[0]] if s.predecessors else self.input_shape
            in_area = in_shape[1] * in_shape[2] if len(in_shape) == 3 else 1
            terms.append((s, ou, iu, area, in_area))
        return tuple(terms)

    # ----------------------------------------------------------- transforms
    def describe(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [s.describe() for s in self.layers],
        }

    def fingerprint(self):
        return json.dumps(self.describe(), sort_keys=True)

    def pruned(self, config: ChannelConfig) -> "ModelGraph":
        """Graph with the channel counts of ``config`` (widths only)."""
        validate_config(self, config)
        layers = [replace(s, in_channels=0, out_channels=config.keep_count[s.id], coupling_group=None)
                  if s.id in config.keep_count else replace(s, in_channels=0, coupling_group=None)
                  for s in self.layers]
        return ModelGraph(layers, self.input_shape, self.num_classes, name=self.name)

    def with_gates(self) -> "ModelGraph":
        """Insert an all-ones channel gate after each prunable layer's batchnorm.

        Prunable layers without a following batchnorm get the gate directly
        after the layer.  Gate ids are ``<layer>.gate``.
        """
        if any(s.kind == "channel-gate" for s in self.layers):
            return self
        after = {}
        for l in self.prunable:
            cons = self.consumers[l]
            if len(cons) == 1 and self[cons[0]].kind == "batchnorm2d":
                after[cons[0]] = l
            else:
                after[l] = l
        layers = []
        rename = {}
        for s in self.layers:
            s = replace(s, in_channels=0, coupling_group=None,
                        predecessors=tuple(rename.get(p, p) for p in s.predecessors))
            layers.append(s)
            if s.id in after:
                gid = f"{after[s.id]}.gate"
                layers.append(LayerSpec(gid, "channel-gate", predecessors=(s.id,)))
                rename[s.id] = gid
        return ModelGraph(layers, self.input_shape, self.num_classes, name=self.name)

    def gate_of(self, layer_id):
        gid = f"{layer_id}.gate"
        return gid if gid in self else None


# --------------------------------------------------------------------- configs
def validate_config(graph: ModelGraph, config: ChannelConfig):
    kc = config.keep_count
    missing = set(graph.prunable) - set(kc)
    if missing:
        raise ConfigError(f"config lacks keep counts for {sorted(missing)}")
    extra = set(kc) - set(graph.prunable)
    if extra:
        raise ConfigError(f"config names non-prunable layers {sorted(extra)}")
    for l in graph.prunable:
        w = graph[l].out_channels
        if not 1 <= kc[l] <= w:
            raise ConfigError(f"layer '{l}': keep count {kc[l]} outside [1, {w}]")
    for g in graph.groups:
        counts = {kc[m] for m in g.members}
        if len(counts) != 1:
            raise ConfigError(f"coupling group {g.id} {g.members} has unequal keep counts {sorted(counts)}")
    if config.keep_indices is not None:
        for l in graph.prunable:
            idx = config.keep_indices.get(l)
            if idx is None:
                raise ConfigError(f"layer '{l}': missing keep indices")
            if len(idx) != kc[l]:
                raise ConfigError(f"layer '{l}': {len(idx)} indices for keep count {kc[l]}")
            if list(idx) != sorted(set(idx)) or (idx and (idx[0] < 0 or idx[-1] >= graph[l].out_channels)):
                raise ConfigError(f"layer '{l}': keep indices must be sorted, unique and in range")
    return config


def config_from_units(graph: ModelGraph, unit_counts: dict) -> ChannelConfig:
    """Expand per-unit keep counts to every member layer."""
    return ChannelConfig({l: int(unit_counts[graph.unit_of[l]]) for l in graph.prunable})


def complexity(graph: ModelGraph, config: ChannelConfig | None = None) -> ComplexityReport:
    """FLOPs (1 multiply-accumulate = 1 FLOP) and parameter count of a configuration.

    Convolutions count ``out*in*kh*kw*Ho*Wo``, linear layers ``out*in``;
    batchnorm, relu, gates, additions and max-pooling one FLOP per output
    element, global average pooling one per input element.
    """
    if config is None:
        config = ChannelConfig.full(graph)
    else:
        validate_config(graph, config)
    kc = config.keep_count
    width = {u: kc[graph.unit_members[u][0]] for u in graph.units}
    flops, params = _count(graph, width)
    full = _full_counts(graph)
    return ComplexityReport(
        flops=sum(flops.values()),
        params=params,
        flops_ratio=sum(flops.values()) / full[0],
        params_ratio=params / full[1],
        flops_by_kind=flops,
    )


def _full_counts(graph):
    cached = graph.__dict__.get("_full_counts_cache")
    if cached is None:
        f, p = _count(graph, {u: graph.unit_width(u) for u in graph.units})
        cached = (sum(f.values()), p)
        graph.__dict__["_full_counts_cache"] = cached
    return cached


def _count(graph, width):
    flops = dict.fromkeys(KINDS, 0)
    params = 0
    in_c0 = graph.input_shape[0]
    for s, ou, iu, area, in_area in graph._flop_terms:
        cout = width[ou] if ou is not None else s.out_channels
        cin = width[iu] if iu is not None else (s.in_channels if s.predecessors else in_c0)
        kind = s.kind
        if kind == "conv2d":
            k = s.kernel[0] * s.kernel[1]
            flops[kind] += cout * cin * k * area
            params += cout * cin * k + (cout if s.bias else 0)
        elif kind == "linear":
            flops[kind] += cout * cin
            params += cout * cin + (cout if s.bias else 0)
        elif kind == "avgpool-global":
            flops[kind] += cin * in_area
        else:
            flops[kind] += cout * area
            if kind == "batchnorm2d":
                params += 2 * cout
            elif kind == "channel-gate":
                params += cout
    return flops, params


def allowed_widths(width, granularity=1, min_keep=1):
    return [w for w in range(1, width + 1) if w % granularity == 0 and w >= min_keep]


def config_space_size(graph: ModelGraph, mode="subset", granularity=1, min_keep=1) -> int:
    """Number of channel configurations.

    ``subset`` counts every non-empty subset of each unit's channels
    (``prod(2**c - 1)``); ``channel-count`` counts the admissible widths per
    unit: multiples of ``granularity`` in ``[min_keep, c]``.  Coupled groups
    count once.
    """
    if granularity < 1 or min_keep < 1:
        raise ConfigError("granularity and min_keep must be >= 1")
    total = 1
    for u in graph.units:
        c = graph.unit_width(u)
        if min_keep > c:
            raise ConfigError(f"min_keep {min_keep} exceeds width {c} of '{u}'")
        if mode == "subset":
            total *= 2 ** c - 1
        elif mode == "channel-count":
            total *= len(allowed_widths(c, granularity, min_keep))
        else:
            raise ConfigError(f"unknown counting mode '{mode}'")
    return total


# --------------------------------------------------------------------- presets
def mini_vgg(widths=(16, "M", 32, "M", 64, 64), input_shape=(3, 16, 16), num_classes=10):
    layers = []
    i = 0
    for w in widths:
        if w == "M":
            layers.append(LayerSpec(f"pool{i}", "maxpool2d", kernel=(2, 2), stride=2))
            continue
        i += 1
        layers += [
            LayerSpec(f"conv{i}", "conv2d", out_channels=int(w), kernel=(3, 3), padding=1),
            LayerSpec(f"bn{i}", "batchnorm2d"),
            LayerSpec(f"relu{i}", "relu"),
        ]
    layers += [LayerSpec("gap", "avgpool-global"),
               LayerSpec("fc", "linear", out_channels=num_classes, bias=True)]
    return ModelGraph(_chain(layers), input_shape, num_classes, name="mini-vgg")


def mini_resnet(depth=8, base_width=16, input_shape=(3, 16, 16), num_classes=10):
    """CIFAR-style ResNet: ``(depth - 2) / 6`` basic blocks in each of three stages."""
    if (depth - 2) % 6 or depth < 8:
        raise GraphError(f"mini-resnet depth must be 6n+2 with n >= 1, got {depth}")
    n = (depth - 2) // 6
    layers = [
        LayerSpec("stem", "conv2d", out_channels=base_width, kernel=(3, 3), padding=1),
        LayerSpec("stem.bn", "batchnorm2d", predecessors=("stem",)),
        LayerSpec("stem.relu", "relu", predecessors=("stem.bn",)),
    ]
    prev = "stem.relu"
    c_prev = base_width
    for stage in range(3):
        w = base_width * 2 ** stage
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            p = f"s{stage + 1}b{b + 1}"
            layers += [
                LayerSpec(f"{p}.conv1", "conv2d", out_channels=w, kernel=(3, 3), stride=stride,
                          padding=1, predecessors=(prev,)),
                LayerSpec(f"{p}.bn1", "batchnorm2d", predecessors=(f"{p}.conv1",)),
                LayerSpec(f"{p}.relu1", "relu", predecessors=(f"{p}.bn1",)),
                LayerSpec(f"{p}.conv2", "conv2d", out_channels=w, kernel=(3, 3), padding=1,
                          predecessors=(f"{p}.relu1",)),
                LayerSpec(f"{p}.bn2", "batchnorm2d", predecessors=(f"{p}.conv2",)),
            ]
            shortcut = prev
            if stride != 1 or c_prev != w:
                layers += [
                    LayerSpec(f"{p}.down", "conv2d", out_channels=w, kernel=(1, 1), stride=stride,
                              predecessors=(prev,)),
                    LayerSpec(f"{p}.down.bn", "batchnorm2d", predecessors=(f"{p}.down",)),
                ]
                shortcut = f"{p}.down.bn"
            layers += [
                LayerSpec(f"{p}.add", "add-skip", predecessors=(f"{p}.bn2", shortcut)),
                LayerSpec(f"{p}.relu2", "relu", predecessors=(f"{p}.add",)),
            ]
            prev = f"{p}.relu2"
            c_prev = w
    layers += [
        LayerSpec("gap", "avgpool-global", predecessors=(prev,)),
        LayerSpec("fc", "linear", out_channels=num_classes, bias=True, predecessors=("gap",)),
    ]
    return ModelGraph(layers, input_shape, num_classes, name=f"mini-resnet-{depth}-{base_width}")


def mlp_probe(in_features=16, hidden=(32, 16), num_classes=4):
    layers = []
    for i, h in enumerate(hidden):
        layers += [LayerSpec(f"fc{i + 1}", "linear", out_channels=int(h), bias=True),
                   LayerSpec(f"relu{i + 1}", "relu")]
    layers.append(LayerSpec("out", "linear", out_channels=num_classes, bias=True))
    return ModelGraph(_chain(layers), (in_features,), num_classes, name="mlp-probe")


def _chain(layers):
    out = []
    prev = None
    for s in layers:
        if not s.predecessors and prev is not None:
            s = replace(s, predecessors=(prev,))
        out.append(s)
        prev = s.id
    return out


PRESETS = {"mini-vgg": mini_vgg, "mini-resnet": mini_resnet, "mlp-probe": mlp_probe}


def from_description(desc: dict) -> ModelGraph:
    layers = []
    prev = None
    for i, d in enumerate(desc["layers"]):
        d = dict(d)
        try:
            lid = str(d.pop("id"))
            kind = d.pop("kind")
        except KeyError as e:
            raise GraphError(f"layer #{i}: missing field {e}") from None
        preds = d.pop("predecessors", None)
        if preds is None:
            preds = [prev] if prev is not None else []
        preds = tuple(p for p in preds if p != INPUT)
        kernel = d.pop("kernel", 2 if kind == "maxpool2d" else 1)
        stride = d.pop("stride", _pair(kernel)[0] if kind == "maxpool2d" else 1)
        layers.append(LayerSpec(
            lid, kind,
            in_channels=int(d.pop("in_channels", 0)),
            out_channels=int(d.pop("out_channels", 0)),
            kernel=_pair(kernel), stride=int(stride), padding=int(d.pop("padding", 0)),
            bias=bool(d.pop("bias", False)), predecessors=preds,
        ))
        if d:
            raise GraphError(f"layer '{lid}': unknown fields {sorted(d)}")
        prev = lid
    return ModelGraph(layers, desc["input_shape"], desc["num_classes"], name=desc.get("name", "custom"))


def load_graph(path) -> ModelGraph:
    with open(path) as f:
        desc = yaml.safe_load(f)
    return from_description(desc)


def save_graph(graph: ModelGraph, path):
    with open(path, "w") as f:
        yaml.safe_dump(graph.describe(), f, sort_keys=False)


_PRESET_RE = re.compile(r"^([a-z\-]+)(?::(.*))?$")


def build_graph(preset, **kwargs) -> ModelGraph:
    """Build a graph from a preset name or a description file.

    Presets accept keyword overrides either as ``kwargs`` or inline, e.g.
    ``"mini-resnet:depth=20,base_width=16"``.
    """
    if isinstance(preset, ModelGraph):
        return preset
    p = Path(str(preset))
    if p.suffix in (".yaml", ".yml", ".json") or p.exists():
        return load_graph(p)
    m = _PRESET_RE.match(str(preset))
    if not m or m.group(1) not in PRESETS:
        raise GraphError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)} or a description file")
    if m.group(2):
        for item in re.split(r",(?![^\[]*\])", m.group(2)):
            k, v = item.split("=")
            kwargs.setdefault(k.strip().replace("-", "_"), yaml.safe_load(v))
    for k in ("input_shape", "widths", "hidden"):
        if k in kwargs and isinstance(kwargs[k], list):
            kwargs[k] = tuple(kwargs[k])
    return PRESETS[m.group(1)](**kwargs)
