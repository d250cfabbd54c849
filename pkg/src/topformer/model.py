"""TopFormer network graph and its forward pass.

The forward pass is written once against an *ops backend*: an object
exposing ``param(name)`` plus the tensor kernels as methods. Three
backends exist: :class:`Eager` (numeric inference, here),
``autodiff.Tape`` (recorded 64-bit execution) and
``analyzer.CostOps`` (symbolic shapes and FLOPs). All of them therefore
see exactly the same graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .config import MBBlockCfg, VariantConfig
from .errors import BindError, ConfigError, InputError, ShapeError, StateError
from .tensor import BN_EPS, BatchNormParams, ConvSpec, Tensor

BN_FIELDS = ("gamma", "beta", "mean", "var")


# --------------------------------------------------------------------------
# graph nodes


@dataclass(frozen=True)
class ConvBN:
    """Conv, optional inference batch norm, optional ReLU6."""

    name: str
    spec: ConvSpec
    bn: bool = True
    act: bool = False

    def slots(self, folded=False):
        """(weight name, dims, learnable) for every parameter of this layer."""
        out = [(f"{self.name}.conv.weight", self.spec.weight_dims, True)]
        if self.spec.has_bias or (folded and self.bn):
            out.append((f"{self.name}.conv.bias", (self.spec.out_ch,), True))
        if self.bn and not folded:
            c = self.spec.out_ch
            out += [(f"{self.name}.bn.{f}", (c,), f in ("gamma", "beta")) for f in BN_FIELDS]
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(d)) for _, d, learn in self.slots() if learn)


@dataclass(frozen=True)
class MBBlock:
    name: str
    in_ch: int
    cfg: MBBlockCfg
    expand: Optional[ConvBN]
    dw: ConvBN
    project: ConvBN

    @property
    def residual(self) -> bool:
        return self.cfg.stride == 1 and self.in_ch == self.cfg.out_channels

    def layers(self):
        return [c for c in (self.expand, self.dw, self.project) if c is not None]


@dataclass(frozen=True)
class Attention:
    name: str
    qkv: ConvBN
    out: ConvBN
    heads: int
    key_dim: int
    value_dim: int

    def layers(self):
        return [self.qkv, self.out]


@dataclass(frozen=True)
class FFN:
    name: str
    expand: ConvBN
    dw: ConvBN
    project: ConvBN

    def layers(self):
        return [self.expand, self.dw, self.project]


@dataclass(frozen=True)
class TransformerBlock:
    name: str
    attn: Attention
    ffn: FFN

    def layers(self):
        return self.attn.layers() + self.ffn.layers()


@dataclass(frozen=True)
class SIM:
    name: str
    stage: int
    local: ConvBN
    gweight: Optional[ConvBN]
    gsem: ConvBN

    def layers(self):
        return [c for c in (self.local, self.gweight, self.gsem) if c is not None]


@dataclass(frozen=True)
class Head:
    kind: str
    classifier: ConvBN
    fuse: Optional[ConvBN] = None
    reduce: Tuple[ConvBN, ...] = ()

    def layers(self):
        return list(self.reduce) + [c for c in (self.fuse, self.classifier) if c is not None]


@dataclass(frozen=True)
class Graph:
    stem: ConvBN
    stem_block: MBBlock
    stages: Tuple[Tuple[MBBlock, ...], ...]
    blocks: Tuple[TransformerBlock, ...]
    sims: Tuple[SIM, ...]
    head: Head

    def conv_layers(self):
        """Every ConvBN in execution order."""
        out = [self.stem] + self.stem_block.layers()
        for stage in self.stages:
            for b in stage:
                out += b.layers()
        for blk in self.blocks:
            out += blk.layers()
        for s in self.sims:
            out += s.layers()
        return out + self.head.layers()

    def mb_blocks(self):
        return [self.stem_block] + [b for st in self.stages for b in st]


@dataclass(frozen=True)
class Model:
    variant: VariantConfig
    graph: Graph
    weights: Optional[dict] = None
    folded: bool = False

    @property
    def bound(self) -> bool:
        return self.weights is not None

    def slots(self):
        return [s for layer in self.graph.conv_layers() for s in layer.slots(self.folded)]

    def param_names(self):
        return [n for n, _, _ in self.slots()]


# --------------------------------------------------------------------------
# build


def _conv(name, cin, cout, k=1, stride=1, groups=1, bn=True, act=False, bias=False):
    return ConvBN(name, ConvSpec.same(cin, cout, k, stride, groups, has_bias=bias), bn, act)


def _mb(name, cin, cfg: MBBlockCfg) -> MBBlock:
    hid = cin * cfg.expand_ratio
    expand = None if cfg.expand_ratio == 1 else _conv(f"{name}.expand", cin, hid, act=True)
    dw = _conv(f"{name}.dw", hid, hid, cfg.kernel, cfg.stride, groups=hid, act=True)
    project = _conv(f"{name}.project", hid, cfg.out_channels)
    return MBBlock(name, cin, cfg, expand, dw, project)


def make_transformer_block(p, c, heads, key_dim, value_dim, expansion=2) -> TransformerBlock:
    attn = Attention(f"{p}.attn", _conv(f"{p}.qkv", c, heads * (2 * key_dim + value_dim)),
                     _conv(f"{p}.attn_out", heads * value_dim, c), heads, key_dim, value_dim)
    hid = c * expansion
    ffn = FFN(f"{p}.ffn", _conv(f"{p}.ffn.expand", c, hid, act=True),
              _conv(f"{p}.ffn.dw", hid, hid, 3, groups=hid, act=True),
              _conv(f"{p}.ffn.project", hid, c))
    return TransformerBlock(p, attn, ffn)


def build(variant: VariantConfig) -> Model:
    """Build the unbound graph for ``variant``."""
    v = variant.validate()
    stem = _conv("tpm.stem", 3, v.stem_channels, v.stem_kernel, v.stem_stride, act=True)
    stem_block = _mb("tpm.stem_mb", v.stem_channels, v.stem_block)
    cin = v.stem_block.out_channels
    stages = []
    for si, stage in enumerate(v.stages, start=1):
        blocks = []
        for bi, cfg in enumerate(stage):
            blocks.append(_mb(f"tpm.s{si}.b{bi}", cin, cfg))
            cin = cfg.out_channels
        stages.append(tuple(blocks))

    c = v.concat_width
    blocks = [make_transformer_block(f"sase.blk{i}", c, v.num_heads, v.key_dim, v.value_dim,
                                     v.ffn_expansion)
              for i in range(v.num_transformer_blocks)]

    m, ncls = v.sim_width, v.num_classes
    sims = []
    if v.head_kind == "classification":
        head = Head("classification", _conv("head.classifier", c, ncls, bn=False, bias=True))
    else:
        for st in v.injection_stages:
            ci = v.stage_channels[st]
            p = f"sim.s{st + 1}"
            gweight = None if v.head_kind == "sum" else _conv(f"{p}.gweight", ci, m)
            sims.append(SIM(p, st, _conv(f"{p}.local", ci, m), gweight, _conv(f"{p}.gsem", ci, m)))
        classifier = _conv("head.classifier", m, ncls, bn=False, bias=True)
        if v.head_kind == "concat":
            r = max(1, m // 8)
            reduce = tuple(_conv(f"head.reduce{i}", m, r, act=True) for i in range(len(sims)))
            head = Head("concat", classifier, _conv("head.fuse", r * len(sims), m, act=True), reduce)
        else:
            head = Head(v.head_kind, classifier, _conv("head.fuse", m, m, act=True))
    return Model(v, Graph(stem, stem_block, tuple(stages), tuple(blocks), tuple(sims), head))


# --------------------------------------------------------------------------
# binding / folding


def bind(model: Model, store) -> Model:
    """Attach weights. ``store`` is any name -> array mapping (e.g. WeightStore)."""
    expected = {n: d for n, d, _ in model.slots()}
    names = list(store.keys())
    missing = [n for n in expected if n not in store]
    unexpected = [n for n in names if n not in expected]
    mismatched = [f"{n} {tuple(np.shape(store[n]))}!={expected[n]}"
                  for n in expected if n in store and tuple(np.shape(store[n])) != tuple(expected[n])]
    if missing or unexpected or mismatched:
        raise BindError(missing, unexpected, mismatched)
    weights = {n: np.asarray(store[n]) for n in expected}
    return replace(model, weights=weights)


def fold(model: Model) -> Model:
    """Return an equivalent model with every BN merged into its conv."""
    if not model.bound:
        raise StateError("fold requires a bound model")
    if model.folded:
        return model
    w = model.weights
    out = {}
    for layer in model.graph.conv_layers():
        p = layer.name
        weight = w[f"{p}.conv.weight"]
        bias = w.get(f"{p}.conv.bias")
        if layer.bn:
            bn = BatchNormParams(w[f"{p}.bn.gamma"], w[f"{p}.bn.beta"], w[f"{p}.bn.mean"], w[f"{p}.bn.var"])
            weight, bias = T.batchnorm_fold(layer.spec, weight, bias, bn)
        out[f"{p}.conv.weight"] = weight
        if bias is not None:
            out[f"{p}.conv.bias"] = bias
    return replace(model, weights=out, folded=True)


# --------------------------------------------------------------------------
# eager backend


class Eager:
    """Numeric backend over raw arrays; ``dtype`` is the compute precision."""

    def __init__(self, weights: dict, dtype=np.float32):
        self.weights = weights
        self.dtype = np.dtype(dtype)
        self._cache = {}

    def param(self, name):
        a = self._cache.get(name)
        if a is None:
            a = self._cache[name] = np.asarray(self.weights[name], dtype=self.dtype)
        return a

    def dims(self, x):
        return x.shape

    def conv2d(self, x, spec, w, b=None, name=None):
        return T._conv2d(x, spec, w, b)

    def batchnorm(self, x, gamma, beta, mean, var, name=None):
        return T._batchnorm(x, gamma, beta, mean, var, BN_EPS)

    def relu6(self, x):
        return T._relu6(x)

    def sigmoid(self, x):
        return T._sigmoid(x)

    def softmax(self, x):
        return T._softmax(x)

    def adaptive_avg_pool(self, x, oh, ow):
        return T._adaptive_avg_pool(x, oh, ow)

    def upsample(self, x, oh, ow):
        return T._bilinear(x, oh, ow)

    def add(self, a, b):
        T._same_dims("add", a, b)
        return a + b

    def hadamard(self, a, b):
        T._same_dims("hadamard", a, b)
        return a * b

    def concat(self, xs):
        return T._concat(list(xs))

    def split(self, x, sizes):
        return [x[:, lo:hi] for lo, hi in T._split_bounds(x.shape[1], sizes)]

    def matmul(self, a, b, name=None):
        return T._matmul(a, b)

    def reshape(self, x, dims):
        return np.ascontiguousarray(x).reshape(dims)

    def transpose(self, x):
        return np.ascontiguousarray(np.swapaxes(x, 2, 3))

    def scale(self, x, c):
        return x * x.dtype.type(c)


# --------------------------------------------------------------------------
# forward pieces (backend-agnostic)


def conv_bn(ops, layer: ConvBN, x, folded=False):
    p = layer.name
    w = ops.param(f"{p}.conv.weight")
    has_b = layer.spec.has_bias or (folded and layer.bn)
    b = ops.param(f"{p}.conv.bias") if has_b else None
    spec = layer.spec if layer.spec.has_bias == has_b else replace(layer.spec, has_bias=has_b)
    y = ops.conv2d(x, spec, w, b, name=p)
    if layer.bn and not folded:
        y = ops.batchnorm(y, *(ops.param(f"{p}.bn.{f}") for f in BN_FIELDS), name=p)
    if layer.act:
        y = ops.relu6(y)
    return y


def mb_block(ops, blk: MBBlock, x, folded=False):
    y = x
    for layer in blk.layers():
        y = conv_bn(ops, layer, y, folded)
    return ops.add(x, y) if blk.residual else y


def forward_pyramid(ops, model: Model, x, folded=None):
    folded = model.folded if folded is None else folded
    g = model.graph
    x = conv_bn(ops, g.stem, x, folded)
    x = mb_block(ops, g.stem_block, x, folded)
    tokens = []
    for stage in g.stages:
        for blk in stage:
            x = mb_block(ops, blk, x, folded)
        tokens.append(x)
    return tokens


def pool_and_concat(ops, tokens, out_h, out_w):
    return ops.concat([ops.adaptive_avg_pool(t, out_h, out_w) for t in tokens])


def mhsa(ops, attn: Attention, x, folded=False):
    n, _, h, w = ops.dims(x)
    heads, d, dv, N = attn.heads, attn.key_dim, attn.value_dim, h * w
    qkv = conv_bn(ops, attn.qkv, x, folded)
    q, k, v = ops.split(qkv, [heads * d, heads * d, heads * dv])
    q = ops.transpose(ops.reshape(q, (n, heads, d, N)))     # n,H,N,D
    k = ops.reshape(k, (n, heads, d, N))                    # n,H,D,N
    v = ops.transpose(ops.reshape(v, (n, heads, dv, N)))    # n,H,N,2D
    logits = ops.scale(ops.matmul(q, k, name=f"{attn.name}.qk"), 1.0 / math.sqrt(d))
    probs = ops.softmax(logits)
    y = ops.matmul(probs, v, name=f"{attn.name}.av")        # n,H,N,2D
    y = ops.reshape(ops.transpose(y), (n, heads * dv, h, w))
    y = ops.relu6(y)
    return conv_bn(ops, attn.out, y, folded)


def ffn(ops, f: FFN, x, folded=False):
    for layer in f.layers():
        x = conv_bn(ops, layer, x, folded)
    return x


def transformer_block(ops, blk: TransformerBlock, x, folded=False):
    x = ops.add(x, mhsa(ops, blk.attn, x, folded))
    return ops.add(x, ffn(ops, blk.ffn, x, folded))


def sim_forward(ops, sim: SIM, local, global_slice, folded=False):
    _, _, h, w = ops.dims(local)
    loc = conv_bn(ops, sim.local, local, folded)
    sem = ops.upsample(conv_bn(ops, sim.gsem, global_slice, folded), h, w)
    if sim.gweight is None:
        return ops.add(loc, sem)
    gate = ops.upsample(ops.sigmoid(conv_bn(ops, sim.gweight, global_slice, folded)), h, w)
    return ops.add(ops.hadamard(loc, gate), sem)


def seg_head(ops, head: Head, sim_outputs, folded=False):
    if head.kind not in ("default", "sum", "concat"):
        raise ConfigError(f"seg_head: unsupported head kind {head.kind!r}")
    _, _, h, w = ops.dims(sim_outputs[0])
    if head.kind == "concat":
        parts = []
        for layer, s in zip(head.reduce, sim_outputs):
            r = conv_bn(ops, layer, s, folded)
            parts.append(r if ops.dims(r)[2:] == (h, w) else ops.upsample(r, h, w))
        x = ops.concat(parts)
    else:
        x = sim_outputs[0]
        for s in sim_outputs[1:]:
            x = ops.add(x, ops.upsample(s, h, w))
    x = conv_bn(ops, head.fuse, x, folded)
    return conv_bn(ops, head.classifier, x, folded)


def cls_head(ops, head: Head, x, folded=False):
    if head.kind != "classification":
        raise ConfigError(f"cls_head needs a classification head, got {head.kind!r}")
    return conv_bn(ops, head.classifier, ops.adaptive_avg_pool(x, 1, 1), folded)


def check_input(model: Model, h: int, w: int):
    m = model.variant.required_multiple
    if h % m or w % m:
        raise InputError(f"input {h}x{w} not divisible by {m}; height and width must be multiples of {m}")


def run_graph(ops, model: Model, x, upsample_to_input=False, folded=None):
    """Full forward on any backend. Returns the backend's output value."""
    folded = model.folded if folded is None else folded
    v, g = model.variant, model.graph
    n, c, h, w = ops.dims(x)
    if c != 3:
        raise ShapeError(f"image channel axis: expected 3, got {c}")
    check_input(model, h, w)
    tokens = forward_pyramid(ops, model, x, folded)
    sase = pool_and_concat(ops, tokens, h // v.sase_stride, w // v.sase_stride)
    for blk in g.blocks:
        sase = transformer_block(ops, blk, sase, folded)
    if v.head_kind == "classification":
        return cls_head(ops, g.head, sase, folded)
    slices = ops.split(sase, list(v.stage_channels))
    sims = [sim_forward(ops, s, tokens[s.stage], slices[s.stage], folded) for s in g.sims]
    out = seg_head(ops, g.head, sims, folded)
    if upsample_to_input:
        out = ops.upsample(out, h, w)
    return out


def forward(model: Model, image, upsample_to_input: bool = False, dtype=np.float32):
    """Numeric inference.

    Segmentation models return logits as a :class:`Tensor`; classification
    models return an ``(n, num_classes)`` score array.
    """
    if not model.bound:
        raise StateError("model has no weights bound; call bind() first")
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"image must be rank 4 (n, 3, h, w), got {x.shape}")
    out = run_graph(Eager(model.weights, dtype), model, x, upsample_to_input)
    if model.variant.head_kind == "classification":
        return out.reshape(out.shape[0], -1)
    return Tensor.wrap(out)
