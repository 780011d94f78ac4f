"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at
the end of the pytest run (and immediately when run with ``-s``).
"""

import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from mgk import complexity as C
from mgk import kernels as K
from mgk.diagnostics import matrix_rank, rank_distribution, rank_report_json
from mgk.em import GaussianKeyMixture, em_prior_iterations
from mgk.equivalence import equivalence_suite
from mgk.gradcheck import GRADCHECK_VARIANTS, model_gradient_check
from mgk.model import ModelSpec
from mgk.tasks import TaskSpec
from mgk.training import OptimizerSpec, train

from _report import record
from oracles import linear_quadratic, rank_row_reduction


def unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_01_row_stochasticity():
    rng = np.random.default_rng(1)
    layers = [
        ("softmax", {}),
        ("gaussian", {}),
        ("mgk", {}),
        ("mgk", {"kernel": "dot"}),
        ("mgk", {"estep": "hard"}),
        ("mgk", {"estep": "soft_mstep", "key_mode": "shifted"}),
        ("linear", {}),
        ("mlk", {}),
    ]
    start = time.perf_counter()
    worst, seen = 0.0, set()
    for t in range(100):
        variant, kw = layers[t % len(layers)]
        m = int(rng.integers(1, 4)) if variant in K.MIXTURE_VARIANTS else 1
        n, h, d = int(rng.integers(1, 65)), int(rng.integers(1, 5)), int(rng.integers(1, 9))
        causal = bool(rng.integers(2))
        cfg = K.AttentionConfig(variant=variant, n_heads=h, n_components=m, head_dim=d, input_dim=2 * d, causal=causal, **kw)
        params = K.init_attention_params(cfg, rng)
        x = rng.standard_normal((n, 2 * d)) * rng.uniform(0.1, 5.0)
        _, heads = K.multi_head(x, params, cfg, return_heads=True, materialize=True)
        for head in heads:
            a = head.scores.data
            assert np.all(a >= 0)
            if causal:
                assert np.all(np.triu(a, 1) == 0)
            worst = max(worst, float(np.max(np.abs(a.sum(axis=-1) - 1.0))))
        seen.add((variant, m, causal))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10.0
    record(1, "row-stochasticity", ok, f"100 configs, max |row sum - 1| = {worst:.3g} (tol 1e-9), {elapsed:.2f}s (< 10s)")
    assert ok


def test_02_reduction_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        q, k = unit_rows(rng.standard_normal((n, d))), unit_rows(rng.standard_normal((n, d)))
        v = rng.standard_normal((n, 2))
        soft = K.softmax_attention(q, k, v).scores.data
        mgk = K.mgk_attention(q, [k], v, np.ones(1), (math.sqrt(d),), kernel="gaussian").scores.data
        worst = max(worst, float(np.max(np.abs(mgk - soft))))
        assert np.array_equal(mgk.argmax(axis=1), soft.argmax(axis=1))
    ok = worst <= 1e-12
    record(2, "reduction identity", ok, f"20 instances, max |A_mgk - A_softmax| = {worst:.3g} (tol 1e-12)")
    assert ok


def test_03_linearization():
    rng = np.random.default_rng(3)
    worst = 0.0
    for n, m, causal in itertools.product([1, 7, 33, 64], [1, 2], [False, True]):
        d = int(rng.integers(1, 9))
        q, v = rng.standard_normal((n, d)), rng.standard_normal((n, 3))
        keys = [rng.standard_normal((n, d)) for _ in range(m)]
        pi = rng.dirichlet(np.ones(m)) if m > 1 else np.ones(1)
        outs = [K.mlk_attention(q, keys, v, pi, causal).output.data]
        if m == 1:
            outs.append(K.linear_attention(q, keys[0], v, causal).output.data)
        ref = linear_quadratic(q, keys, v, pi, causal)
        for out in outs:
            worst = max(worst, float(np.max(np.abs(out - ref)) / np.max(np.abs(ref))))
    ok = worst <= 1e-10
    record(3, "MLK linearization", ok, f"16 cases N<=64, M in {{1,2}}, causal on/off, max rel err = {worst:.3g} (tol 1e-10)")
    assert ok


def test_04_hard_soft_limit():
    rng = np.random.default_rng(4)
    worst, done = 0.0, 0
    while done < 20:
        n, d, m = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(2, 4))
        base = rng.standard_normal((n, d))
        keys = [base]
        for _ in range(m - 1):
            off = rng.standard_normal(d)
            keys.append(base + off * rng.uniform(1.0, 3.0) / np.linalg.norm(off))
        q = rng.standard_normal((n, d))
        sq = np.sort(np.stack([((q[:, None] - k[None]) ** 2).sum(-1) for k in keys], -1).reshape(n, -1), axis=1)
        if np.any(sq[:, 1] - sq[:, 0] < 1e-3):
            continue
        v = rng.standard_normal((n, 2))
        s2 = (1e-6,) * m
        soft = K.mgk_attention(q, keys, v, rng.dirichlet(np.ones(m)), s2, "soft").scores.data
        hard = K.mgk_attention(q, keys, v, None, s2, "hard").scores.data
        worst = max(worst, float(np.max(np.abs(soft - hard))))
        done += 1
    ok = worst <= 1e-6
    record(4, "hard/soft limit", ok, f"20 instances at sigma2=1e-6, max |A_soft - A_hard| = {worst:.3g} (tol 1e-6)")
    assert ok


def test_05_gradient_suite():
    start = time.perf_counter()
    worst, groups = 0.0, set()
    for i, kw in enumerate(GRADCHECK_VARIANTS):
        errs = model_gradient_check(seed=i, width=8, **kw)
        worst = max(worst, max(errs.values()))
        groups |= set(errs)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60.0
    record(
        5,
        "gradient suite",
        ok,
        f"{len(GRADCHECK_VARIANTS)} model configs, groups {sorted(groups)}, max rel err = {worst:.3g} (tol 1e-4), {elapsed:.1f}s (< 60s)",
    )
    assert ok


def test_06_flop_accounting():
    grid = list(itertools.product([1, 2, 5, 16, 64, 257, 1024, 4096], [2, 4, 8, 16, 32], [1, 16, 64, 128, 256]))[:200]
    assert len(grid) == 200
    a = all(
        C.softmax_flops(N, H, D, H * D) - Fraction(C.mgk_flops_grouped(N, H, D, H * D, 2))
        == N * N * H * (D - Fraction(1, 2)) + N * H * D * (2 * H * D + H * D - 1)
        for N, H, D in grid
    )
    small = [(1, 2, 1, 1, 2), (2, 2, 2, 3, 2), (3, 4, 2, 4, 2), (5, 4, 3, 2, 2), (4, 6, 2, 5, 3), (6, 3, 2, 2, 1), (2, 8, 4, 8, 2), (7, 8, 2, 3, 4)]
    b = all(C.instrumented_count(C.mgk_config(H, D, Dx, M), N) == C.mgk_flops(N, H, D, Dx, M) for N, H, D, Dx, M in small)
    c = all(C.grouping_discrepancy(N, H, D, H * D, 2) == Fraction(N * H * D, 2) for N, H, D in grid) and all(
        C.grouping_discrepancy(N, H, D, Dx, M) == Fraction(N * H * D * (M - 1), M) for N, H, D, Dx, M in small
    )
    ok = a and b and c
    record(6, "FLOP accounting", ok, f"(a) savings identity on 200 points: {a}; (b) instrumented == mgk_flops on 8 points: {b}; (c) discrepancy NHD(M-1)/M: {c}")
    assert ok


def test_07_em_properties():
    rng = np.random.default_rng(7)
    worst_step, worst_nest = -math.inf, -math.inf
    for _ in range(10):
        n, d, m = int(rng.integers(10, 60)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        q = rng.standard_normal((n, d))
        keys = [rng.standard_normal((n, d)) for _ in range(m)]
        _, trace = em_prior_iterations(q, keys, rng.dirichlet(np.ones(m)), rng.uniform(0.3, 3.0, m), 50)
        worst_step = max(worst_step, float(np.max(np.diff(trace))))
        centers = rng.standard_normal((3, d)) * 3
        sample = centers[rng.integers(0, 3, n)] + rng.standard_normal((n, d))
        s2 = float(rng.uniform(0.5, 2.0))
        one = GaussianKeyMixture(1, sigma2=[s2]).fit(sample).nll_
        two = GaussianKeyMixture(2, sigma2=[s2, s2]).fit(sample).nll_
        worst_nest = max(worst_nest, two - one)
    ok = worst_step <= 1e-9 and worst_nest <= 1e-6
    record(7, "EM properties", ok, f"max NLL increase per M-step = {worst_step:.3g} (tol 1e-9); max NLL_M2 - NLL_M1 = {worst_nest:.3g} (tol 1e-6)")
    assert ok


def test_08_rank_oracle():
    rng = np.random.default_rng(8)
    agree = 0
    for t in range(100):
        n = int(rng.integers(1, 13))
        r = 1 + t % 12
        r = min(r, n)
        a = rng.integers(-4, 5, (n, r)) @ rng.integers(-4, 5, (r, n))
        agree += matrix_rank(a, 1e-6) == rank_row_reduction(a)
    ok = agree == 100
    record(8, "rank oracle", ok, f"{agree}/100 matrices agree with exact row reduction (threshold 1e-6)")
    assert ok


SMOKE_VARIANTS = [("softmax", 2), ("gaussian", 2), ("mgk", 1), ("linear", 2), ("mlk", 1)]
SMOKE_OPT = OptimizerSpec(lr=3e-3, batch_size=32)


def smoke_model(variant, heads, task):
    return ModelSpec(variant, n_heads=heads, embed_dim=32, ffn_dim=64, n_tokens=task.n_tokens, n_classes=task.n_classes, max_len=task.seq_len)


@pytest.mark.slow
def test_09_end_to_end_smoke():
    task = TaskSpec("associative_recall", vocab=16, seq_len=64, n_train=1000, n_test=500, seed=42)
    start = time.perf_counter()
    runs = {}
    for variant, heads in SMOKE_VARIANTS:
        report, net, (_, test) = train(smoke_model(variant, heads, task), task, 30, SMOKE_OPT, seed=42)
        hists = rank_distribution(net, test.tokens, count=16, seed=42)
        runs[variant] = (report, float(np.mean([r for h in hists for r in h.ranks])))
    elapsed = time.perf_counter() - start
    ratios = {v: r.final_train_loss / r.initial_loss for v, (r, _) in runs.items()}
    a = all(x <= 0.5 for x in ratios.values())
    acc_mgk, acc_soft = runs["mgk"][0].test_accuracy, runs["softmax"][0].test_accuracy
    b = acc_mgk >= acc_soft - 0.05
    rank_mgk, rank_soft = runs["mgk"][1], runs["softmax"][1]
    timed = elapsed < 300.0
    ok = a and b and timed
    detail = (
        "(a) final/initial loss "
        + ", ".join(f"{v} {x:.3f}" for v, x in ratios.items())
        + f" (<= 0.5); (b) 1-head MGK test acc {acc_mgk:.3f} vs 2-head softmax {acc_soft:.3f} (slack 0.05)"
        + f"; (c) mean rank MGK {rank_mgk:.2f} vs softmax {rank_soft:.2f} ({'MGK >= softmax' if rank_mgk >= rank_soft else 'MGK < softmax, reported only'})"
        + f"; {elapsed:.0f}s (< 300s)"
    )
    record(9, "end-to-end smoke", ok, detail)
    assert a, ratios
    assert b
    assert timed


def test_10_determinism(tmp_path):
    task = TaskSpec(vocab=8, seq_len=16, n_train=64, n_test=32, seed=42)
    model = smoke_model("mgk", 2, task)

    def payloads():
        report, net, (_, test) = train(model, task, 2, SMOKE_OPT, seed=42)
        return [
            json.dumps(report.payload(), sort_keys=True),
            rank_report_json(rank_distribution(net, test.tokens, count=4, seed=42)),
            json.dumps([r.to_dict() for r in equivalence_suite(seed=42)], sort_keys=True),
            C.to_csv(C.ratio_sweep([4, 8], [1, 2], H=2, instrument=True)),
            json.dumps({k: format(v, ".17g") for k, v in model_gradient_check(seed=42, variant="mgk").items()}),
        ]

    first, second = payloads(), payloads()
    same = [a.encode() == b.encode() for a, b in zip(first, second)]
    ok = all(same)
    record(10, "determinism", ok, f"{sum(same)}/{len(same)} report payloads byte-identical on rerun (train, ranks, equivalence, complexity, gradcheck)")
    assert ok


def test_00_equivalence_gate():
    results = equivalence_suite()
    assert all(r.passed for r in results), [r.to_dict() for r in results]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
