"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from topformer import analyzer, bind, build, checks, fold, forward, iofmt, random_init, variant
from topformer.bench import run_benchmark
from topformer.errors import BindError

VARIANTS = ("tiny", "small", "base")


def verdict(n, title, ok, detail):
    line = f"AC{n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def within(got, target, tol):
    return abs(got - target) <= tol * target


def test_ac01_parameter_reconciliation():
    t0 = time.perf_counter()
    seg = {n: analyzer.count_params(build(variant(n))).total_params / 1e6 for n in VARIANTS}
    cls = {n: analyzer.count_params(build(variant(n, head_kind="classification"))).total_params / 1e6
           for n in VARIANTS}
    dt = time.perf_counter() - t0
    ok = all(within(seg[n], t, 0.10) for n, t in zip(VARIANTS, (1.4, 3.1, 5.1)))
    ok &= all(within(cls[n], t, 0.10) for n, t in zip(VARIANTS, (1.50, 3.11, 5.07)))
    ok &= dt < 5
    detail = ("seg " + "/".join(f"{seg[n]:.3f}" for n in VARIANTS) + "M vs 1.4/3.1/5.1; cls "
              + "/".join(f"{cls[n]:.3f}" for n in VARIANTS) + f"M vs 1.50/3.11/5.07; {dt:.2f}s")
    verdict(1, "params within 10%", ok, detail)


def test_ac02_flop_reconciliation():
    t0 = time.perf_counter()
    seg = {n: analyzer.count_flops(build(variant(n)), 512, 512).total_flops / 1e9 for n in VARIANTS}
    t448 = analyzer.count_flops(build(variant("tiny")), 448, 448).total_flops / 1e9
    cls = {n: analyzer.count_flops(build(variant(n, head_kind="classification")), 224, 224).total_flops / 1e6
           for n in VARIANTS}
    dt = time.perf_counter() - t0
    ok = all(within(seg[n], t, 0.15) for n, t in zip(VARIANTS, (0.6, 1.2, 1.8)))
    ok &= within(t448, 0.5, 0.15)
    ok &= all(within(cls[n], t, 0.15) for n, t in zip(VARIANTS, (126, 235, 373)))
    ok &= dt < 5
    detail = ("@512 " + "/".join(f"{seg[n]:.3f}" for n in VARIANTS) + f"G vs 0.6/1.2/1.8; tiny@448 {t448:.3f}G"
              " vs 0.5; cls@224 " + "/".join(f"{cls[n]:.1f}" for n in VARIANTS) + f"M vs 126/235/373; {dt:.2f}s")
    verdict(2, "FLOPs within 15%", ok, detail)


def test_ac03_output_stride_ablation():
    g = {s: analyzer.count_flops(build(variant("base", sase_stride=s)), 512, 512).total_flops / 1e9
         for s in (32, 64, 128)}
    ok = all(within(g[s], t, 0.15) for s, t in zip((32, 64, 128), (2.6, 1.8, 1.6)))
    ok &= g[32] > g[64] > g[128]
    verdict(3, "sase_stride ablation", ok,
            f"s32/s64/s128 = {g[32]:.3f}/{g[64]:.3f}/{g[128]:.3f}G vs 2.6/1.8/1.6, strictly decreasing")


def test_ac04_head_variant_params():
    p = {k: analyzer.count_params(build(variant("base", head_kind=k))).total_params for k in ("default", "concat", "sum")}
    gap = (p["default"] - p["sum"]) / 1e6
    ok = p["default"] > p["concat"] > p["sum"] and 0.085 / 2 <= gap <= 0.085 * 2
    verdict(4, "head params", ok,
            f"default/concat/sum = {p['default']:,}/{p['concat']:,}/{p['sum']:,}; gap {gap:.4f}M vs 0.085M")


def test_ac05_shape_traces():
    got = {}
    for n in VARIANTS:
        tr = analyzer.trace_shapes(build(variant(n)), 512, 512)
        got[n] = tr.stage_sizes() + [tr.sase[2]]
    ok = all(v == [256, 128, 64, 32, 16, 8] for v in got.values())
    verdict(5, "shape traces @512", ok, "; ".join(f"{n} {v}" for n, v in got.items()))


def test_ac06_bn_fold_equivalence():
    e2e, layer = {}, {}
    x = np.random.default_rng(0).standard_normal((1, 3, 128, 128)).astype(np.float32)
    for n in VARIANTS:
        m = build(variant(n))
        bound = bind(m, random_init(m, seed=0, randomize_bn=True))
        e2e[n] = checks.max_rel_diff(forward(fold(bound), x).data, forward(bound, x).data)
        layer[n] = max(checks.per_layer_fold_diffs(bound, x).values())
    ok = all(v < 1e-4 for v in e2e.values()) and all(v < 1e-5 for v in layer.values())
    verdict(6, "BN fold", ok, "end-to-end " + "/".join(f"{e2e[n]:.1e}" for n in VARIANTS)
            + " (<1e-4); worst layer " + "/".join(f"{layer[n]:.1e}" for n in VARIANTS) + " (<1e-5)")


def test_ac07_gradient_suite():
    t0 = time.perf_counter()
    reports = checks.run_gradchecks(seed=0)
    dt = time.perf_counter() - t0
    ops = [r for r in reports if r.name != "model_micro"]
    model = next(r for r in reports if r.name == "model_micro")
    ok = all(r.passed and r.tol <= 1e-4 for r in ops) and model.passed and model.tol <= 1e-3 and dt < 60
    failed = [r.name for r in reports if not r.passed]
    worst_op = max(ops, key=lambda r: r.max_rel_err)
    verdict(7, "gradient suite", ok,
            f"{len(ops)} op/block checks worst {worst_op.max_rel_err:.1e} ({worst_op.name}); "
            f"composed model {model.max_rel_err:.1e} (<1e-3); {dt:.1f}s (<60s)"
            + (f"; failed: {', '.join(failed)}" if failed else ""))


def test_ac08_breakdown_sanity():
    shares = analyzer.breakdown(analyzer.count_flops(build(variant("tiny")), 512, 512))
    top = max(shares, key=lambda k: shares[k][0])
    ok = top == "SASE" and shares["SASE"][1] < 25
    verdict(8, "tiny breakdown", ok,
            f"largest param share {top} {shares[top][0]:.1f}%; SASE FLOP share {shares['SASE'][1]:.1f}% (<25%)")


@pytest.mark.slow
def test_ac09_benchmark_ordering():
    med = {n: run_benchmark(variant(n), 512, 512, warmup=2, iters=20, threads=1).median_ms for n in VARIANTS}
    ok = med["tiny"] < med["small"] < med["base"]
    verdict(9, "latency ordering", ok,
            "median ms tiny/small/base = " + "/".join(f"{med[n]:.1f}" for n in VARIANTS) + " (20 iters, 1 thread)")


def test_ac10_serialization(tmp_path):
    m = build(variant("tiny"))
    store = random_init(m, seed=0)
    a, b = tmp_path / "a.tpfw", tmp_path / "b.tpfw"
    iofmt.save_weights(store, a)
    iofmt.save_weights(iofmt.load_weights(a), b)
    identical = a.read_bytes() == b.read_bytes()
    victim = "sase.blk2.ffn.dw.conv.weight"
    try:
        bind(m, iofmt.load_weights(a).renamed(victim, victim + "_renamed"))
        named = False
    except BindError as e:
        named = victim in str(e)
    verdict(10, "serialization", identical and named,
            f"re-save byte-identical={identical}; bind rejection names {victim}={named}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
