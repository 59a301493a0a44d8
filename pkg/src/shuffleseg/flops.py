"""Static per-layer cost model: parameters, MACs and FLOPs of a graph.

Counting convention (tagged on every report): ``FLOPs = 2 * MACs`` for
convolutions, plus one add per output element for a bias. Transposed
convolutions are counted in their scatter form,
``kh * kw * (C_out / g) * C_in * H_in * W_in``, which is identical to the MAC
count of the adjoint convolution mapping the transposed conv's output back
to its input. Elementwise layers contribute to a separate non-MAC subtotal.
All arithmetic is on Python integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from .errors import ConfigError
from .graph import Graph, LayerNode, infer_shapes, node_output_shape, padded_size
from .tensor import Shape4, as_shape

CONVENTION = "flops=2*macs(+bias); non-mac layers counted separately"


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    output_shape: Tuple[int, int, int, int]
    params: int
    macs: int
    flops: int
    buffers: int = 0  # batch-norm running statistics, not trainable


def count_layer(node: LayerNode, in_shapes: Sequence[Shape4]) -> CostRow:
    out = node_output_shape(node, in_shapes)
    kind, spec = node.kind, node.spec
    elems = out.n * out.c * out.h * out.w
    params = macs = buffers = 0
    if kind in ("conv", "score", "tconv"):
        kh, kw = spec.kernel
        g = spec.groups
        params = kh * kw * (spec.in_channels // g) * spec.out_channels
        if kind == "tconv":
            src = in_shapes[0]
            macs = kh * kw * spec.in_channels * (spec.out_channels // g) * src.n * src.h * src.w
        else:
            macs = kh * kw * (spec.in_channels // g) * spec.out_channels * out.n * out.h * out.w
        flops = 2 * macs
        if spec.has_bias:
            params += spec.out_channels
            flops += elems
    elif kind == "bn":
        params = 2 * out.c
        buffers = 2 * out.c
        flops = 2 * elems
    elif kind in ("relu", "add"):
        flops = elems
    elif kind in ("maxpool", "avgpool"):
        flops = spec.kernel[0] * spec.kernel[1] * elems
    elif kind in ("shuffle", "concat"):
        flops = 0
    else:
        raise ConfigError(f"cost analyzer cannot count kind {kind!r} ({node.name})")
    return CostRow(node.name, kind, tuple(out), params, macs, flops, buffers)


@dataclass
class CostReport:
    rows: List[CostRow]
    input_shape: Tuple[int, int, int, int]
    convention: str = CONVENTION
    variant: str = ""
    requested_hw: Tuple[int, int] = None

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def mac_flops(self) -> int:
        return sum(r.flops for r in self.rows if r.kind in ("conv", "score", "tconv"))

    @property
    def non_mac_flops(self) -> int:
        return self.flops - self.mac_flops

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def by_kind(self):
        out = {}
        for r in self.rows:
            out[r.kind] = out.get(r.kind, 0) + r.flops
        return out

    def format_table(self) -> str:
        header = ("layer", "kind", "output", "params", "MACs", "FLOPs")
        lines = [header]
        for r in self.rows:
            shape = "x".join(str(d) for d in r.output_shape[1:])
            lines.append((r.name, r.kind, shape, f"{r.params:,}", f"{r.macs:,}", f"{r.flops:,}"))
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        text = []
        for k, row in enumerate(lines):
            text.append("  ".join(c.ljust(widths[i]) if i < 3 else c.rjust(widths[i]) for i, c in enumerate(row)))
            if k == 0:
                text.append("  ".join("-" * w for w in widths))
        n, c, h, w = self.input_shape
        text += ["", f"input        {c}x{h}x{w} (HxW={h}x{w}, WxH={w}x{h})"]
        if self.requested_hw and self.requested_hw != (h, w):
            rh, rw = self.requested_hw
            text.append(f"padded from  {rh}x{rw}")
        text += [
            f"convention   {self.convention}",
            f"params       {self.params:,}  (+{self.buffers:,} batch-norm running statistics)",
            f"MACs         {self.macs:,}",
            f"MAC FLOPs    {self.mac_flops:,}",
            f"non-MAC      {self.non_mac_flops:,}",
            f"total FLOPs  {self.flops:,}  = {self.gflops:.3g} GFLOPs",
        ]
        return "\n".join(text)

    def format_kv(self) -> str:
        n, c, h, w = self.input_shape
        lines = [
            f"variant={self.variant}",
            f"input_height={h}",
            f"input_width={w}",
            f"requested_height={(self.requested_hw or (h, w))[0]}",
            f"requested_width={(self.requested_hw or (h, w))[1]}",
            f"convention={self.convention}",
        ]
        for r in self.rows:
            lines.append(f"layer.{r.name}.kind={r.kind}")
            lines.append(f"layer.{r.name}.params={r.params}")
            lines.append(f"layer.{r.name}.macs={r.macs}")
            lines.append(f"layer.{r.name}.flops={r.flops}")
        lines += [
            f"total.params={self.params}",
            f"total.buffers={self.buffers}",
            f"total.macs={self.macs}",
            f"total.mac_flops={self.mac_flops}",
            f"total.non_mac_flops={self.non_mac_flops}",
            f"total.flops={self.flops}",
            f"total.gflops={self.gflops:.3g}",
        ]
        return "\n".join(lines)


def count_graph(graph: Graph, input_shape, pad: bool = False) -> CostReport:
    """Per-sample cost of ``graph``; the batch component of ``input_shape`` is ignored.

    With ``pad`` an input size the graph cannot take is first rounded up to
    the next valid size, as a deployment would zero-pad the image.
    """
    s = as_shape(input_shape)
    h, w = padded_size(graph.variant, s.h, s.w) if pad else (s.h, s.w)
    s = Shape4(1, s.c, h, w)
    shapes = infer_shapes(graph, s)
    rows = [count_layer(node, [shapes[i] for i in node.inputs]) for node in graph.nodes]
    report = CostReport(rows, tuple(s), variant=graph.variant)
    report.requested_hw = (as_shape(input_shape).h, as_shape(input_shape).w)
    return report
