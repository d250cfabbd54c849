import numpy as np
import pytest

from topformer import analyzer, bind, build, forward, random_init, variant
from topformer import model as M
from topformer.errors import InputError


@pytest.fixture(scope="module")
def models():
    return {n: build(variant(n)) for n in ("tiny", "small", "base")}


def test_stem_params_closed_form(models):
    stem = next(r for r in analyzer.count_params(models["base"]).layers if r.name == "tpm.stem")
    assert stem.params == 3 * 16 * 9 + 2 * 16 == 464


def test_running_stats_not_counted():
    layer = M._conv("x", 3, 16, 3)
    assert layer.param_count() == 464
    assert len(layer.slots()) == 5  # weight, gamma, beta, mean, var


def test_stem_flops_closed_form(models):
    rep = analyzer.count_flops(models["base"], 512, 512)
    stem = next(r for r in rep.layers if r.name == "tpm.stem")
    assert stem.flops == 256 * 256 * 16 * 3 * 9  # ~28.3M


def test_attention_matmul_flops(models):
    rep = analyzer.count_flops(models["base"], 512, 512)
    by = {r.name: r.flops for r in rep.layers}
    n_tok = 8 * 8
    assert by["sase.blk0.attn.qk"] == 8 * n_tok * n_tok * 16
    assert by["sase.blk0.attn.av"] == 8 * n_tok * n_tok * 32


def test_flops_scaling_ratio(models):
    for m in models.values():
        r = analyzer.count_flops(m, 1024, 1024).total_flops / analyzer.count_flops(m, 512, 512).total_flops
        assert 4 <= r <= 16


def test_params_invariant_to_input(models):
    for m in models.values():
        a = analyzer.count_flops(m, 256, 256).total_params
        assert a == analyzer.count_flops(m, 1024, 512).total_params == analyzer.count_params(m).total_params


def test_variant_ordering(models):
    reps = [analyzer.count_flops(models[n], 512, 512) for n in ("tiny", "small", "base")]
    assert reps[0].total_params < reps[1].total_params < reps[2].total_params
    assert reps[0].total_flops < reps[1].total_flops < reps[2].total_flops


def test_breakdown_partition_and_tiny_shares(models):
    shares = analyzer.breakdown(analyzer.count_flops(models["tiny"], 512, 512))
    assert abs(sum(p for p, _ in shares.values()) - 100) < 0.1
    assert abs(sum(f for _, f in shares.values()) - 100) < 0.1
    assert max(shares, key=lambda k: shares[k][0]) == "SASE"
    assert abs(shares["SASE"][1] - 10) <= 8


def test_tsv_format(models):
    lines = list(analyzer.count_flops(models["tiny"], 64, 64).tsv_lines())
    name, params, flops, dims = lines[0].split("\t")
    assert name == "tpm.stem" and int(params) == 464 and int(flops) > 0
    assert tuple(map(int, dims.split(","))) == (1, 16, 32, 32)


def test_trace_stage_sizes_at_512(models):
    for m in models.values():
        tr = analyzer.trace_shapes(m, 512, 512)
        assert tr.stage_sizes() == [256, 128, 64, 32, 16]
        assert tr.sase[2:] == (8, 8)


def test_trace_indivisible_is_input_error(models):
    with pytest.raises(InputError):
        analyzer.trace_shapes(models["tiny"], 500, 512)


class _ShapeLog(M.Eager):
    def __init__(self, w):
        super().__init__(w)
        self.trace = []

    def conv2d(self, x, spec, w, b=None, name=None):
        y = super().conv2d(x, spec, w, b, name)
        self.trace.append((name, y.shape))
        return y

    def matmul(self, a, b, name=None):
        y = super().matmul(a, b, name)
        self.trace.append((name, y.shape))
        return y


def test_trace_equals_runtime_shapes():
    m = build(variant("tiny"))
    ops = _ShapeLog(random_init(m, 0))
    M.run_graph(ops, m, np.zeros((1, 3, 128, 192), np.float32))
    assert ops.trace == analyzer.trace_shapes(m, 128, 192).layers


def test_format_report_mentions_convention(models):
    text = analyzer.format_report(analyzer.count_flops(models["tiny"], 512, 512), per_layer=True)
    assert "1 MAC = 1 FLOP" in text and "sase.blk0.qkv" in text and "GFLOPs" in text
