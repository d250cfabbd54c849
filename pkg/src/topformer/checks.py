"""Gradient-check suite and numeric self-tests used by the CLI."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import analyzer, model as M
from . import tensor as T
from .autodiff import GradcheckReport, fd_gradcheck
from .config import VARIANTS, micro_config, variant
from .iofmt import random_init
from .tensor import ConvSpec


@dataclass
class GradCase:
    name: str
    fn: Callable
    shapes: dict
    tol: float = 1e-4
    ranges: Optional[dict] = None


def _bn_shapes(prefix, c):
    return {f"{prefix}.{f}": (c,) for f in ("gamma", "beta", "mean", "var")}


def _layer_shapes(layers, folded=False):
    shapes, ranges = {}, {}
    for layer in layers:
        for name, dims, _ in layer.slots(folded):
            shapes[name] = dims
            if name.endswith(".bn.var"):
                ranges[name] = (0.5, 1.5)
    return shapes, ranges


def op_cases() -> List[GradCase]:
    """One randomized case per differentiable op (<= 6x6 spatial, <= 16 channels)."""
    c3 = ConvSpec.same(2, 3, 3, has_bias=True)
    c_s2 = ConvSpec.same(3, 4, 3, stride=2)
    c_grp = ConvSpec.same(4, 6, 3, groups=2)
    dw = ConvSpec.same(4, 4, 3, groups=4)
    dw_s2 = ConvSpec.same(4, 4, 5, stride=2, groups=4)
    cases = [
        GradCase("conv2d", lambda t, v: t.conv2d(v["x"], c3, v["w"], v["b"]),
                 {"x": (1, 2, 4, 4), "w": c3.weight_dims, "b": (3,)}),
        GradCase("conv2d_stride2", lambda t, v: t.conv2d(v["x"], c_s2, v["w"]),
                 {"x": (1, 3, 5, 5), "w": c_s2.weight_dims}),
        GradCase("conv2d_grouped", lambda t, v: t.conv2d(v["x"], c_grp, v["w"]),
                 {"x": (2, 4, 4, 4), "w": c_grp.weight_dims}),
        GradCase("depthwise_conv2d", lambda t, v: t.conv2d(v["x"], dw, v["w"]),
                 {"x": (1, 4, 5, 5), "w": dw.weight_dims}),
        GradCase("depthwise_conv2d_k5s2", lambda t, v: t.conv2d(v["x"], dw_s2, v["w"]),
                 {"x": (1, 4, 6, 6), "w": dw_s2.weight_dims}),
        GradCase("batchnorm", lambda t, v: t.batchnorm(v["x"], *(v[f"bn.{f}"] for f in M.BN_FIELDS)),
                 {"x": (1, 3, 4, 4), **_bn_shapes("bn", 3)}, ranges={"bn.var": (0.5, 1.5)}),
        GradCase("relu6", lambda t, v: t.relu6(v["x"]), {"x": (1, 4, 6, 6)},
                 ranges={"x": (-1.0, 7.0)}),
        GradCase("sigmoid", lambda t, v: t.sigmoid(v["x"]), {"x": (1, 3, 4, 4)}, tol=1e-6),
        GradCase("softmax_lastdim", lambda t, v: t.softmax(v["x"]), {"x": (1, 2, 3, 5)}),
        GradCase("adaptive_avg_pool", lambda t, v: t.adaptive_avg_pool(v["x"], 2, 3),
                 {"x": (1, 3, 5, 6)}),
        GradCase("bilinear_upsample", lambda t, v: t.upsample(v["x"], 5, 6), {"x": (1, 2, 3, 3)}),
        GradCase("add", lambda t, v: t.add(v["a"], v["b"]), {"a": (1, 2, 3, 3), "b": (1, 2, 3, 3)}),
        GradCase("hadamard", lambda t, v: t.hadamard(v["a"], v["b"]),
                 {"a": (1, 2, 3, 3), "b": (1, 2, 3, 3)}),
        GradCase("concat_channels", lambda t, v: t.concat([v["a"], v["b"]]),
                 {"a": (1, 2, 3, 3), "b": (1, 3, 3, 3)}),
        GradCase("split_channels", lambda t, v: t.hadamard(*t.split(v["x"], [2, 2])[::-1]),
                 {"x": (1, 4, 3, 3)}),
        GradCase("matmul_batched", lambda t, v: t.matmul(v["a"], v["b"]),
                 {"a": (1, 2, 3, 4), "b": (1, 2, 4, 5)}),
        GradCase("reshape", lambda t, v: t.sigmoid(t.reshape(v["x"], (1, 2, 6, 3))), {"x": (1, 4, 3, 3)}),
        GradCase("transpose_last2", lambda t, v: t.sigmoid(t.transpose(v["x"])), {"x": (1, 2, 3, 5)}),
        GradCase("scale", lambda t, v: t.scale(v["x"], -2.5), {"x": (1, 2, 3, 3)}),
    ]
    return cases


def block_cases() -> List[GradCase]:
    """Composite checks: a transformer block, a SIM, and the micro network."""
    blk = M.make_transformer_block("blk", 16, 2, 4, 8)
    shapes, ranges = _layer_shapes(blk.layers())
    shapes["x"] = (1, 16, 4, 4)
    cases = [GradCase("transformer_block", lambda t, v: M.transformer_block(t, blk, v["x"]),
                      shapes, 1e-4, ranges)]

    sim = M.SIM("sim", 0, M._conv("sim.local", 3, 4), M._conv("sim.gweight", 5, 4), M._conv("sim.gsem", 5, 4))
    shapes, ranges = _layer_shapes(sim.layers())
    shapes.update(local=(1, 3, 4, 4), glob=(1, 5, 2, 2))
    cases.append(GradCase("sim", lambda t, v: M.sim_forward(t, sim, v["local"], v["glob"]),
                          shapes, 1e-4, ranges))

    micro = M.build(micro_config())
    shapes, ranges = _layer_shapes(micro.graph.conv_layers())
    shapes["image"] = (1, 3, 4, 4)
    cases.append(GradCase("model_micro", lambda t, v: M.run_graph(t, micro, v["image"], folded=False),
                          shapes, 1e-3, ranges))
    return cases


def run_gradchecks(seed: int = 0, tol: Optional[float] = None, names=None) -> List[GradcheckReport]:
    """Run all cases; ``tol`` overrides every per-case tolerance when given."""
    out = []
    for case in op_cases() + block_cases():
        if names and case.name not in names:
            continue
        out.append(fd_gradcheck(case.fn, case.shapes, seed=seed, tol=case.tol if tol is None else tol,
                                ranges=case.ranges, name=case.name))
    return out


# --------------------------------------------------------------------------
# selftest


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{self.name}\t{'PASS' if self.passed else 'FAIL'}\t{self.detail}"


def max_rel_diff(a, b) -> float:
    """max|a - b| scaled by max|b| (norm-wise relative difference)."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def fold_equivalence(name: str, size: int = 128, seed: int = 0):
    m = M.build(variant(name))
    bound = M.bind(m, random_init(m, seed, randomize_bn=True))
    x = np.random.default_rng(seed).standard_normal((1, 3, size, size)).astype(np.float32)
    ref = M.forward(bound, x).data
    got = M.forward(M.fold(bound), x).data
    return max_rel_diff(got, ref)


def run_selftest(variants=VARIANTS, fold_size: int = 128) -> List[CheckResult]:
    res = []
    rng = np.random.default_rng(0)
    for name in variants:
        m = M.build(variant(name))
        tr = analyzer.trace_shapes(m, 512, 512)
        sizes = tr.stage_sizes() + [tr.sase[2]]
        res.append(CheckResult(f"shape_trace[{name}]", sizes == [256, 128, 64, 32, 16, 8], str(sizes)))
        d = fold_equivalence(name, fold_size)
        res.append(CheckResult(f"bn_fold[{name}]", d < 1e-4, f"max_rel_diff={d:.2e}"))
        v = m.variant
        slices = [t[1] for t in tr.tokens]
        ok = sum(slices) == v.concat_width == tr.sase[1] and tuple(slices) == v.stage_channels
        res.append(CheckResult(f"channel_split[{name}]", ok, str(slices)))

    a = T.Tensor(rng.standard_normal((1, 3, 4, 4)))
    b = T.Tensor(rng.standard_normal((1, 5, 4, 4)))
    sa, sb = T.split_channels(T.concat_channels([a, b]), [3, 5])
    res.append(CheckResult("split_concat_inverse",
                           np.array_equal(sa.data, a.data) and np.array_equal(sb.data, b.data)))

    x = rng.standard_normal((2, 3, 4, 7)) * 10
    s = T.softmax_lastdim(T.Tensor(x)).data
    shifted = T.softmax_lastdim(T.Tensor(x + 123.0)).data
    res.append(CheckResult("softmax_rows_sum_to_1", bool(np.all(np.abs(s.sum(-1) - 1) < 1e-6))))
    res.append(CheckResult("softmax_shift_invariant", bool(np.max(np.abs(s - shifted)) < 1e-6)))
    return res


class _Recorder(M.Eager):
    """Eager backend that keeps each conv layer's input."""

    def __init__(self, weights):
        super().__init__(weights)
        self.inputs = {}

    def conv2d(self, x, spec, w, b=None, name=None):
        self.inputs[name] = x
        return super().conv2d(x, spec, w, b, name)


def per_layer_fold_diffs(bound: M.Model, image) -> dict:
    """Per conv+BN layer: relative diff of folded conv vs conv followed by BN."""
    rec = _Recorder(bound.weights)
    M.run_graph(rec, bound, np.asarray(image, np.float32), folded=False)
    folded = M.fold(bound).weights
    out = {}
    for layer in bound.graph.conv_layers():
        if not layer.bn:
            continue
        p, x = layer.name, rec.inputs[layer.name]
        w = bound.weights
        ref = T._batchnorm(T._conv2d(x, layer.spec, w[f"{p}.conv.weight"]),
                           *(w[f"{p}.bn.{f}"] for f in M.BN_FIELDS))
        spec = ConvSpec(**{**layer.spec.__dict__, "has_bias": True})
        got = T._conv2d(x, spec, folded[f"{p}.conv.weight"], folded[f"{p}.conv.bias"])
        out[p] = max_rel_diff(got, ref)
    return out
