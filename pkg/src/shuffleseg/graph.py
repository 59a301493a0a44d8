"""Declarative segmentation network graphs and their executor.

A :class:`Graph` is a topologically ordered list of :class:`LayerNode`. The
same description drives shape inference, numeric execution
(:func:`graph_forward` / :func:`graph_backward`) and the static cost analyzer
in :mod:`shuffleseg.flops`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, NumericError, ShapeError
from .ops import ConvSpec, ConvWeights
from .tensor import Shape4, as_shape, check_tensor

KINDS = ("conv", "tconv", "maxpool", "avgpool", "bn", "relu", "shuffle", "add", "concat", "score")
VARIANTS = ("skipnet", "unet", "dilation8s", "dilation4s")
TAP_NAMES = ("conv1", "pool1", "stage2", "stage3", "stage4")

# ShuffleNet stage widths per group count.
STAGE_CHANNELS = {
    1: (144, 288, 576),
    2: (200, 400, 800),
    3: (240, 480, 960),
    4: (272, 544, 1088),
    8: (384, 768, 1536),
}


@dataclass(frozen=True)
class PoolSpec:
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    padding: Tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str
    spec: Any
    inputs: Tuple[str, ...]
    init: str = "he"  # "he", "bilinear" (tconv) or "zero" (layers emitting class logits)

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "tconv", "score", "bn")

    def param_names(self) -> List[str]:
        if self.kind in ("conv", "tconv", "score"):
            names = [f"{self.name}.weight"]
            if self.spec.has_bias:
                names.append(f"{self.name}.bias")
            return names
        if self.kind == "bn":
            return [f"{self.name}.gamma", f"{self.name}.beta"]
        return []

    def buffer_names(self) -> List[str]:
        if self.kind == "bn":
            return [f"{self.name}.running_mean", f"{self.name}.running_var"]
        return []


@dataclass
class Graph:
    nodes: List[LayerNode]
    taps: Dict[str, str]
    output: str
    variant: str = ""
    input_channels: int = 3
    input_name: str = "input"

    def __post_init__(self):
        seen = {self.input_name}
        for node in self.nodes:
            if node.kind not in KINDS:
                raise ConfigError(f"node {node.name}: unknown kind {node.kind!r}")
            if node.name in seen:
                raise ConfigError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(f"node {node.name}: input {src!r} is undefined or not topologically earlier")
            seen.add(node.name)
        for tap, target in self.taps.items():
            if target not in seen:
                raise ConfigError(f"tap {tap!r} refers to missing node {target!r}")
        if self.output not in seen:
            raise ConfigError(f"output node {self.output!r} missing")
        consumed = {src for node in self.nodes for src in node.inputs}
        terminals = [n.name for n in self.nodes if n.name not in consumed]
        if terminals != [self.output]:
            raise ConfigError(f"graph must have exactly one terminal node {self.output!r}, found {terminals}")
        self._by_name = {n.name: n for n in self.nodes}

    def node(self, name: str) -> LayerNode:
        return self._by_name[name]

    def param_nodes(self) -> List[LayerNode]:
        return [n for n in self.nodes if n.has_params]

    def param_keys(self) -> List[str]:
        return [k for n in self.nodes for k in n.param_names()]

    def buffer_keys(self) -> List[str]:
        return [k for n in self.nodes for k in n.buffer_names()]


@dataclass(frozen=True)
class ShuffleUnitSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    groups: int = 3
    dilation: int = 1
    bottleneck_ratio: float = 0.25
    first_groups: Optional[int] = None  # groups of the first pointwise conv; defaults to ``groups``

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"unit stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.out_channels <= self.in_channels:
            raise ConfigError("a stride-2 unit must widen its channels (concat fusion)")
        if self.out_channels < self.in_channels:
            raise ConfigError(f"unit cannot narrow channels {self.in_channels}->{self.out_channels}")
        g1 = self.first_groups or self.groups
        if self.in_channels % g1:
            raise ConfigError(f"unit input {self.in_channels} not divisible by groups {g1}")
        if self.branch_channels % self.groups or self.mid_channels % g1:
            raise ConfigError(f"unit widths not divisible by groups in {self}")

    @property
    def fusion(self) -> str:
        return "add" if self.in_channels == self.out_channels else "concat"

    @property
    def branch_channels(self) -> int:
        if self.fusion == "add":
            return self.out_channels
        return self.out_channels - self.in_channels

    @property
    def mid_channels(self) -> int:
        g = self.groups
        return max(g, int(round(self.out_channels * self.bottleneck_ratio / g)) * g)


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "skipnet"
    n_classes: int = 20
    groups: int = 3
    stage_units: Tuple[int, int, int] = (3, 7, 3)
    stage_channels: Optional[Tuple[int, int, int]] = None
    initial_channels: int = 24
    width_multiplier: float = 1.0
    input_height: int = 512
    input_width: int = 1024

    KEYS = ("variant", "n_classes", "groups", "width_multiplier", "input_height", "input_width")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.groups < 1:
            raise ConfigError("groups must be >= 1")
        if self.stage_channels is None:
            if self.groups not in STAGE_CHANNELS:
                raise ConfigError(f"no default stage widths for groups={self.groups}; give stage_channels")
            object.__setattr__(self, "stage_channels", STAGE_CHANNELS[self.groups])
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")
        for c in self.channels:
            if c % self.groups:
                raise ConfigError(f"stage width {c} not divisible by groups {self.groups}")
        if self.input_height < 1 or self.input_width < 1:
            raise ConfigError("input size must be positive")

    @property
    def channels(self) -> Tuple[int, int, int]:
        """Stage widths after the width multiplier, rounded to the nearest multiple of ``groups``."""
        g = self.groups
        return tuple(max(g, int(round(c * self.width_multiplier / g)) * g) for c in self.stage_channels)

    @property
    def downsample(self) -> int:
        return 32 if self.variant in ("skipnet", "unet") else 8

    @property
    def output_scale(self) -> int:
        """Ratio of input size to logit size."""
        return 2 if self.variant == "dilation4s" else 1

    def replace(self, **kw) -> "ArchConfig":
        return dataclasses.replace(self, **kw)

    def to_mapping(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in self.KEYS}

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "ArchConfig":
        unknown = set(values) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        kw: Dict[str, Any] = {}
        try:
            for key, raw in values.items():
                if key == "variant":
                    kw[key] = str(raw)
                elif key == "width_multiplier":
                    kw[key] = float(raw)
                else:
                    kw[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"bad architecture value: {exc}") from None
        return cls(**kw)


class _Builder:
    def __init__(self):
        self.nodes: List[LayerNode] = []

    def add(self, name, kind, spec, *inputs, init="he") -> str:
        self.nodes.append(LayerNode(name, kind, spec, tuple(inputs), init))
        return name

    def conv_bn(self, name, src, spec: ConvSpec, relu=True) -> str:
        x = self.add(name, "conv", spec, src)
        x = self.add(f"{name}.bn", "bn", spec.out_channels, x)
        if relu:
            x = self.add(f"{name}.relu", "relu", None, x)
        return x


def build_shuffle_unit(b: _Builder, prefix: str, spec: ShuffleUnitSpec, src: str) -> str:
    """Append one ShuffleNet unit reading ``src``; return the name of its output node."""
    g1 = spec.first_groups or spec.groups
    mid, d = spec.mid_channels, spec.dilation
    x = b.conv_bn(f"{prefix}.gconv1", src, ConvSpec(spec.in_channels, mid, 1, groups=g1))
    x = b.add(f"{prefix}.shuffle", "shuffle", spec.groups, x)
    dw = ConvSpec(mid, mid, 3, spec.stride, padding=d, dilation=d, groups=mid)
    x = b.conv_bn(f"{prefix}.dwconv", x, dw, relu=False)
    x = b.conv_bn(f"{prefix}.gconv2", x, ConvSpec(mid, spec.branch_channels, 1, groups=spec.groups), relu=False)
    if spec.fusion == "add":
        fused = b.add(f"{prefix}.add", "add", None, x, src)
    else:
        short = b.add(f"{prefix}.pool", "avgpool", PoolSpec((3, 3), (spec.stride,) * 2, (1, 1)), src)
        fused = b.add(f"{prefix}.concat", "concat", None, short, x)
    return b.add(f"{prefix}.out", "relu", None, fused)


def build_encoder(cfg: ArchConfig, b: Optional[_Builder] = None) -> Tuple[_Builder, Dict[str, str]]:
    b = b or _Builder()
    dilated = cfg.variant.startswith("dilation")
    taps = {}
    x = b.conv_bn("conv1", "input", ConvSpec(3, cfg.initial_channels, 3, 2, 1))
    taps["conv1"] = x
    x = b.add("pool1", "maxpool", PoolSpec((2, 2), (2, 2)), x)
    taps["pool1"] = x
    cin = cfg.initial_channels
    for s, (units, cout) in enumerate(zip(cfg.stage_units, cfg.channels), start=2):
        dilation = {3: 2, 4: 4}.get(s, 1) if dilated else 1
        for u in range(units):
            stride = 2 if u == 0 and not (dilated and s > 2) else 1
            spec = ShuffleUnitSpec(
                cin if u == 0 else cout,
                cout,
                stride=stride,
                groups=cfg.groups,
                dilation=dilation,
                first_groups=1 if (s == 2 and u == 0) else None,
            )
            x = build_shuffle_unit(b, f"stage{s}.unit{u + 1}", spec, x)
        taps[f"stage{s}"] = x
        cin = cout
    return b, taps


def _score(cfg, channels):
    return ConvSpec(channels, cfg.n_classes, 1, has_bias=True)


def _upsampler(cin, cout, stride, bias=False):
    return ConvSpec(cin, cout, 2 * stride, stride, stride // 2, has_bias=bias)


def build_decoder_skipnet(cfg: ArchConfig, b: _Builder, taps) -> str:
    k = cfg.n_classes
    c2, c3, c4 = cfg.channels
    x = b.add("score4", "score", _score(cfg, c4), taps["stage4"], init="zero")
    x = b.add("up4", "tconv", _upsampler(k, k, 2), x, init="bilinear")
    s3 = b.add("score3", "score", _score(cfg, c3), taps["stage3"], init="zero")
    x = b.add("fuse3", "add", None, x, s3)
    x = b.add("up3", "tconv", _upsampler(k, k, 2), x, init="bilinear")
    s2 = b.add("score2", "score", _score(cfg, c2), taps["stage2"], init="zero")
    x = b.add("fuse2", "add", None, x, s2)
    return b.add("up_final", "tconv", _upsampler(k, k, 8), x, init="bilinear")


def build_decoder_unet(cfg: ArchConfig, b: _Builder, taps) -> str:
    c2, c3, c4 = cfg.channels
    c0 = cfg.initial_channels
    x = taps["stage4"]
    schedule = [(c4, c3, "stage3"), (c3, c2, "stage2"), (c2, c0, "pool1"), (c0, c0, "conv1")]
    for i, (cin, cout, tap) in enumerate(schedule, start=1):
        init = "bilinear" if cin == cout else "he"
        x = b.add(f"up{i}", "tconv", _upsampler(cin, cout, 2), x, init=init)
        x = b.add(f"up{i}.bn", "bn", cout, x)
        x = b.add(f"up{i}.relu", "relu", None, x)
        x = b.add(f"fuse{i}", "add", None, x, taps[tap])
    return b.add("up_final", "tconv", _upsampler(c0, cfg.n_classes, 2, bias=True), x, init="zero")


def build_dilation_variant(cfg: ArchConfig, b: _Builder, taps, final_stride: int) -> str:
    if final_stride not in (8, 4):
        raise ConfigError(f"final stride must be 8 or 4, got {final_stride}")
    k = cfg.n_classes
    x = b.add("score4", "score", _score(cfg, cfg.channels[2]), taps["stage4"], init="zero")
    return b.add("up_final", "tconv", _upsampler(k, k, final_stride), x, init="bilinear")


def build_graph(cfg: ArchConfig) -> Graph:
    b, taps = build_encoder(cfg)
    if cfg.variant == "skipnet":
        out = build_decoder_skipnet(cfg, b, taps)
    elif cfg.variant == "unet":
        out = build_decoder_unet(cfg, b, taps)
    else:
        out = build_dilation_variant(cfg, b, taps, 8 if cfg.variant == "dilation8s" else 4)
    return Graph(b.nodes, taps, out, variant=cfg.variant)


# ---------------------------------------------------------------- shapes


def node_output_shape(node: LayerNode, in_shapes: Sequence[Shape4]) -> Shape4:
    kind, spec = node.kind, node.spec
    first = in_shapes[0]
    if kind in ("conv", "score", "tconv"):
        if first.c != spec.in_channels:
            raise ShapeError(f"{node.name}: input has {first.c} channels, expects {spec.in_channels}")
        hw = spec.transposed_output_hw(first.h, first.w) if kind == "tconv" else spec.output_hw(first.h, first.w)
        if min(hw) < 1:
            raise ShapeError(f"{node.name}: empty output {hw} for input {tuple(first)}")
        return Shape4(first.n, spec.out_channels, *hw)
    if kind in ("maxpool", "avgpool"):
        ps = ConvSpec(first.c, first.c, spec.kernel, spec.stride, spec.padding, groups=first.c)
        hw = ps.output_hw(first.h, first.w)
        if min(hw) < 1:
            raise ShapeError(f"{node.name}: empty pool output for input {tuple(first)}")
        return Shape4(first.n, first.c, *hw)
    if kind == "bn":
        if first.c != spec:
            raise ShapeError(f"{node.name}: batch norm over {spec} channels got {first.c}")
        return first
    if kind == "relu":
        return first
    if kind == "shuffle":
        if first.c % spec:
            raise ShapeError(f"{node.name}: {first.c} channels not divisible by {spec} groups")
        return first
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"{node.name}: cannot add {tuple(in_shapes[0])} and {tuple(in_shapes[1])}")
        return first
    if kind == "concat":
        a, c = in_shapes
        if (a.n, a.h, a.w) != (c.n, c.h, c.w):
            raise ShapeError(f"{node.name}: cannot concat {tuple(a)} and {tuple(c)}")
        return Shape4(a.n, a.c + c.c, a.h, a.w)
    raise ConfigError(f"{node.name}: unknown kind {kind!r}")


def size_multiple(variant: str) -> int:
    """Input height and width of ``variant`` must be multiples of this."""
    return 32 if variant in ("skipnet", "unet") else 8 if variant else 1


def padded_size(variant: str, h: int, w: int) -> Tuple[int, int]:
    """Smallest valid input size covering ``h x w`` (zero padding towards bottom/right)."""
    m = size_multiple(variant)
    return -(-h // m) * m, -(-w // m) * m


def infer_shapes(graph: Graph, input_shape) -> Dict[str, Shape4]:
    """Propagate shapes through the graph, raising before any numeric work on bad wiring."""
    s = as_shape(input_shape)
    if s.c != graph.input_channels:
        raise ShapeError(f"graph expects {graph.input_channels} input channels, got {s.c}")
    factor = size_multiple(graph.variant)
    if s.h % factor or s.w % factor:
        raise ConfigError(f"{graph.variant} input size {s.h}x{s.w} must be divisible by {factor}")
    shapes = {graph.input_name: s}
    for node in graph.nodes:
        shapes[node.name] = node_output_shape(node, [shapes[i] for i in node.inputs])
    return shapes


# ---------------------------------------------------------------- weights


@dataclass
class WeightStore:
    """Named trainable parameters plus non-trainable batch-norm buffers."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def numel(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "WeightStore":
        return WeightStore({k: v.astype(dtype) for k, v in self.params.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})

    def conv_weights(self, node: LayerNode) -> ConvWeights:
        bias = self.params.get(f"{node.name}.bias") if node.spec.has_bias else None
        return ConvWeights(self.params[f"{node.name}.weight"], bias)

    def check_matches(self, graph: Graph):
        want_p, want_b = set(graph.param_keys()), set(graph.buffer_keys())
        have_p, have_b = set(self.params), set(self.buffers)
        if want_p != have_p or want_b != have_b:
            missing = sorted((want_p - have_p) | (want_b - have_b))
            extra = sorted((have_p - want_p) | (have_b - want_b))
            raise ConfigError(f"weights do not match architecture; missing={missing} extra={extra}")


def init_weights(graph: Graph, seed: int = 0, dtype=np.float32) -> WeightStore:
    store = WeightStore()
    for idx, node in enumerate(graph.nodes):
        if node.kind in ("conv", "score", "tconv"):
            transposed = node.kind == "tconv"
            if node.init == "bilinear":
                w = ops.make_bilinear_kernel(node.spec.kernel[0], node.spec.out_channels, dtype)
                if node.spec.has_bias:
                    w.bias = np.zeros(node.spec.out_channels, dtype)
            elif node.init == "zero":
                # uniform initial softmax, as for FCN score layers
                w = ConvWeights(np.zeros(node.spec.kernel_shape(transposed), dtype),
                                np.zeros(node.spec.out_channels, dtype) if node.spec.has_bias else None)
            else:
                w = ops.he_init(node.spec, [seed, idx], transposed=transposed, dtype=dtype)
            store.params[f"{node.name}.weight"] = w.kernels
            if w.bias is not None:
                store.params[f"{node.name}.bias"] = w.bias
        elif node.kind == "bn":
            st = ops.BatchNormState.fresh(node.spec, dtype)
            store.params[f"{node.name}.gamma"] = st.gamma
            store.params[f"{node.name}.beta"] = st.beta
            store.buffers[f"{node.name}.running_mean"] = st.running_mean
            store.buffers[f"{node.name}.running_var"] = st.running_var
    return store


# ---------------------------------------------------------------- execution


@dataclass
class ForwardCache:
    values: Dict[str, np.ndarray]
    extras: Dict[str, Any]
    buffers: Dict[str, np.ndarray]  # running statistics after this step


def _bn_state(weights: WeightStore, name: str, mode: str) -> ops.BatchNormState:
    return ops.BatchNormState(
        weights.params[f"{name}.gamma"],
        weights.params[f"{name}.beta"],
        weights.buffers[f"{name}.running_mean"],
        weights.buffers[f"{name}.running_var"],
        mode=mode,
    )


def _forward_node(node: LayerNode, ins, weights: WeightStore, mode: str):
    kind, spec = node.kind, node.spec
    if kind in ("conv", "score"):
        return ops.conv2d_forward(ins[0], spec, weights.conv_weights(node)), None
    if kind == "tconv":
        return ops.transposed_conv2d_forward(ins[0], spec, weights.conv_weights(node)), None
    if kind == "maxpool":
        return ops.max_pool2d(ins[0], spec.kernel, spec.stride, spec.padding)
    if kind == "avgpool":
        return ops.avg_pool2d(ins[0], spec.kernel, spec.stride, spec.padding), None
    if kind == "bn":
        out, new_state, cache = ops.batch_norm_forward(ins[0], _bn_state(weights, node.name, mode))
        return out, (cache, new_state)
    if kind == "relu":
        return ops.relu_forward(ins[0]), None
    if kind == "shuffle":
        return ops.channel_shuffle(ins[0], spec), None
    if kind == "add":
        return ins[0] + ins[1], None
    if kind == "concat":
        return np.concatenate(ins, axis=1), None
    raise ConfigError(f"{node.name}: unknown kind {kind!r}")


def graph_forward(graph: Graph, weights: WeightStore, x: np.ndarray, mode: str = "train",
                  check_finite: bool = False):
    """Run the graph; return ``(logits, cache)``.

    ``cache`` is a :class:`ForwardCache` in train mode and ``None`` in
    inference mode. With ``check_finite`` the first node producing a
    non-finite value raises :class:`NumericError` naming that node.
    """
    if mode not in ("train", "inference"):
        raise ConfigError(f"unknown mode {mode!r}")
    infer_shapes(graph, check_tensor(x, "input"))
    train = mode == "train"
    last_use = {}
    if not train:
        for i, node in enumerate(graph.nodes):
            for src in node.inputs:
                last_use[src] = i
    values = {graph.input_name: x}
    extras: Dict[str, Any] = {}
    buffers: Dict[str, np.ndarray] = {}
    for i, node in enumerate(graph.nodes):
        try:
            out, extra = _forward_node(node, [values[s] for s in node.inputs], weights, mode)
        except ShapeError as exc:
            raise ShapeError(f"{node.name}: {exc}") from exc
        if check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values first produced by layer {node.name!r} ({node.kind})")
        values[node.name] = out
        if node.kind == "bn" and train:
            cache, new_state = extra
            extras[node.name] = cache
            buffers[f"{node.name}.running_mean"] = new_state.running_mean
            buffers[f"{node.name}.running_var"] = new_state.running_var
        elif extra is not None and train:
            extras[node.name] = extra
        if not train:
            for src in node.inputs:
                if last_use.get(src) == i:
                    values.pop(src, None)
    logits = values[graph.output]
    if not train:
        return logits, None
    return logits, ForwardCache(values, extras, buffers)


def _backward_node(node: LayerNode, ins, extra, g, weights: WeightStore, grads: Dict[str, np.ndarray]):
    kind, spec = node.kind, node.spec
    if kind in ("conv", "score", "tconv"):
        w = weights.conv_weights(node)
        fn = ops.transposed_conv2d_backward if kind == "tconv" else ops.conv2d_backward
        gx, gk, gb = fn(ins[0], spec, w, g)
        grads[f"{node.name}.weight"] += gk
        if gb is not None:
            grads[f"{node.name}.bias"] += gb
        return [gx]
    if kind == "maxpool":
        return [ops.max_pool2d_backward(ins[0].shape, extra, g, spec.kernel, spec.stride, spec.padding)]
    if kind == "avgpool":
        return [ops.avg_pool2d_backward(ins[0].shape, g, spec.kernel, spec.stride, spec.padding)]
    if kind == "bn":
        gx, gg, gbeta = ops.batch_norm_backward(g, weights.params[f"{node.name}.gamma"], extra)
        grads[f"{node.name}.gamma"] += gg
        grads[f"{node.name}.beta"] += gbeta
        return [gx]
    if kind == "relu":
        return [ops.relu_backward(ins[0], g)]
    if kind == "shuffle":
        return [ops.channel_shuffle_backward(g, spec)]
    if kind == "add":
        return [g, g]
    if kind == "concat":
        ca = ins[0].shape[1]
        return [g[:, :ca], g[:, ca:]]
    raise ConfigError(f"{node.name}: unknown kind {kind!r}")


def graph_backward(graph: Graph, weights: WeightStore, cache: ForwardCache, grad_logits: np.ndarray):
    """Reverse sweep; return gradients keyed exactly like ``weights.params``."""
    if cache is None:
        raise ConfigError("backward needs a train-mode forward cache")
    out = cache.values[graph.output]
    if grad_logits.shape != out.shape:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} != logits shape {out.shape}")
    grads = {k: np.zeros_like(v) for k, v in weights.params.items()}
    pending: Dict[str, np.ndarray] = {graph.output: grad_logits}
    for node in reversed(graph.nodes):
        g = pending.pop(node.name, None)
        if g is None:
            continue
        ins = [cache.values[s] for s in node.inputs]
        for src, gi in zip(node.inputs, _backward_node(node, ins, cache.extras.get(node.name), g, weights, grads)):
            if src in pending:
                pending[src] = pending[src] + gi
            else:
                pending[src] = gi
    return grads
