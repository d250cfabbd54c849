"""Parameter / FLOP accounting and symbolic shape tracing.

Convention: one multiply-accumulate counts as one FLOP. Counted: convs
(out_elems * in_ch/groups * kh * kw), attention matmuls and the dense
classifier. Not counted: activations, BN (folded at inference),
elementwise adds/products, pooling and interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple


from .errors import ShapeError
from .model import Model, check_input, run_graph

MODULES = ("TPM", "SASE", "SIM", "Head")
_PREFIX = {"tpm": "TPM", "sase": "SASE", "sim": "SIM", "head": "Head"}
CONVENTION = "FLOPs count multiply-accumulates (1 MAC = 1 FLOP); BN, activations, adds, pooling, interpolation excluded"


def module_of(name: str) -> str:
    return _PREFIX[name.split(".", 1)[0]]


@dataclass
class LayerCost:
    name: str
    params: int
    flops: int
    out_dims: Optional[Tuple[int, int, int, int]] = None

    @property
    def module(self) -> str:
        return module_of(self.name)


@dataclass
class CostReport:
    variant: str
    input_hw: Optional[Tuple[int, int]]
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.layers)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.layers)

    def subtotals(self) -> Dict[str, Tuple[int, int]]:
        out = {m: [0, 0] for m in MODULES}
        for r in self.layers:
            out[r.module][0] += r.params
            out[r.module][1] += r.flops
        return {m: (p, f) for m, (p, f) in out.items()}

    def tsv_lines(self):
        """``name<TAB>params<TAB>flops<TAB>n,c,h,w`` per layer."""
        for r in self.layers:
            dims = ",".join(map(str, r.out_dims)) if r.out_dims else ""
            yield f"{r.name}\t{r.params}\t{r.flops}\t{dims}"


class CostOps:
    """Ops backend whose values are dims tuples. Records per-layer costs."""

    def __init__(self, model: Model):
        self.model = model
        self.records: List[LayerCost] = []
        self.trace: List[Tuple[str, tuple]] = []
        self._params = {layer.name: layer.param_count() for layer in model.graph.conv_layers()}

    def param(self, name):
        return None

    def dims(self, x):
        return x

    def conv2d(self, x, spec, w, b=None, name=None):
        n, c, h, wd = x
        if c != spec.in_ch:
            raise ShapeError(f"{name}: channel axis {c} != in_ch {spec.in_ch}")
        ho, wo = spec.output_hw(h, wd)
        out = (n, spec.out_ch, ho, wo)
        kh, kw = spec.kernel
        flops = n * spec.out_ch * ho * wo * (spec.in_ch // spec.groups) * kh * kw
        self.records.append(LayerCost(name, self._params.get(name, 0), flops, out))
        self.trace.append((name, out))
        return out

    def batchnorm(self, x, *args, name=None):
        return x

    def relu6(self, x):
        return x

    sigmoid = softmax = relu6

    def adaptive_avg_pool(self, x, oh, ow):
        return (x[0], x[1], oh, ow)

    def upsample(self, x, oh, ow):
        return (x[0], x[1], oh, ow)

    def add(self, a, b):
        if a != b:
            raise ShapeError(f"elementwise op on differing dims {a} and {b}")
        return a

    hadamard = add

    def concat(self, xs):
        xs = list(xs)
        return (xs[0][0], sum(x[1] for x in xs), xs[0][2], xs[0][3])

    def split(self, x, sizes):
        return [(x[0], s, x[2], x[3]) for s in sizes]

    def matmul(self, a, b, name=None):
        n, c, p, k = a
        q = b[3]
        out = (n, c, p, q)
        self.records.append(LayerCost(name, 0, n * c * p * k * q, out))
        self.trace.append((name, out))
        return out

    def reshape(self, x, dims):
        return tuple(dims)

    def transpose(self, x):
        return (x[0], x[1], x[3], x[2])

    def scale(self, x, c):
        return x


def count_params(model: Model) -> CostReport:
    """Learnable parameters per layer (conv weights/biases, BN gamma+beta)."""
    rep = CostReport(model.variant.name, None)
    for layer in model.graph.conv_layers():
        rep.layers.append(LayerCost(layer.name, layer.param_count(), 0))
    return rep


def count_flops(model: Model, input_h: int, input_w: int, batch: int = 1,
                upsample_to_input: bool = False) -> CostReport:
    ops = CostOps(model)
    run_graph(ops, model, (batch, 3, input_h, input_w), upsample_to_input, folded=False)
    return CostReport(model.variant.name, (input_h, input_w), ops.records)


@dataclass
class ShapeTrace:
    input_dims: tuple
    layers: List[Tuple[str, tuple]]
    tokens: List[tuple]
    sase: tuple
    sims: List[tuple]
    output: tuple
    stem: tuple

    def stage_sizes(self):
        """Spatial size of stem output, then each token scale."""
        return [self.stem[2]] + [t[2] for t in self.tokens]


def trace_shapes(model: Model, input_h: int, input_w: int, batch: int = 1,
                 upsample_to_input: bool = False) -> ShapeTrace:
    """Symbolic trace (no arithmetic) of every layer's output dims."""
    from . import model as M

    check_input(model, input_h, input_w)
    ops = CostOps(model)
    x = (batch, 3, input_h, input_w)
    g, v = model.graph, model.variant
    stem = M.mb_block(ops, g.stem_block, M.conv_bn(ops, g.stem, x))
    tokens = M.forward_pyramid(ops, model, x, folded=False)
    sase = M.pool_and_concat(ops, tokens, input_h // v.sase_stride, input_w // v.sase_stride)
    for blk in g.blocks:
        sase = M.transformer_block(ops, blk, sase)
    sims = []
    if v.head_kind != "classification":
        slices = ops.split(sase, list(v.stage_channels))
        sims = [M.sim_forward(ops, s, tokens[s.stage], slices[s.stage]) for s in g.sims]
    full = CostOps(model)
    out = run_graph(full, model, x, upsample_to_input, folded=False)
    return ShapeTrace(x, full.trace, tokens, sase, sims, out, stem)


def breakdown(report: CostReport) -> Dict[str, Tuple[float, float]]:
    """Per-module (param %, FLOP %) of the report totals."""
    tp, tf = report.total_params, report.total_flops
    return {m: (100.0 * p / tp if tp else 0.0, 100.0 * f / tf if tf else 0.0)
            for m, (p, f) in report.subtotals().items()}


def format_report(report: CostReport, per_layer: bool = False) -> str:
    lines = [f"# {CONVENTION}"]
    hw = f"{report.input_hw[0]}x{report.input_hw[1]}" if report.input_hw else "-"
    lines.append(f"variant: {report.variant}  input: {hw}")
    if per_layer:
        w = max(len(r.name) for r in report.layers)
        lines.append(f"{'layer':<{w}}  {'params':>10}  {'flops':>14}  output")
        for r in report.layers:
            dims = "x".join(map(str, r.out_dims)) if r.out_dims else "-"
            lines.append(f"{r.name:<{w}}  {r.params:>10,}  {r.flops:>14,}  {dims}")
        lines.append("")
    shares = breakdown(report)
    lines.append(f"{'module':<6}  {'params':>10}  {'param%':>7}  {'flops':>14}  {'flop%':>6}")
    for m, (p, f) in report.subtotals().items():
        ps, fs = shares[m]
        lines.append(f"{m:<6}  {p:>10,}  {ps:>6.1f}%  {f:>14,}  {fs:>5.1f}%")
    lines.append(f"{'total':<6}  {report.total_params:>10,}  {100:>6.1f}%  {report.total_flops:>14,}  {100:>5.1f}%")
    lines.append(f"params_M: {report.total_params / 1e6:.3f}")
    if report.input_hw:
        lines.append(f"GFLOPs: {report.total_flops / 1e9:.3f}")
    return "\n".join(lines)


def format_trace(trace: ShapeTrace) -> str:
    lines = [f"input     {'x'.join(map(str, trace.input_dims))}",
             f"stem      {'x'.join(map(str, trace.stem))}"]
    for i, t in enumerate(trace.tokens, start=1):
        lines.append(f"T{i}        {'x'.join(map(str, t))}")
    lines.append(f"SASE      {'x'.join(map(str, trace.sase))}")
    for i, s in enumerate(trace.sims):
        lines.append(f"SIM{i}      {'x'.join(map(str, s))}")
    lines.append(f"output    {'x'.join(map(str, trace.output))}")
    return "\n".join(lines)
