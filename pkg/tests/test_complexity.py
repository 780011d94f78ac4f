import csv
import io
import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgk import complexity as C
from mgk.exceptions import DomainError
from mgk.kernels import init_attention_params

pos = st.integers(1, 64)


class TestSoftmaxFlops:
    def test_examples(self):
        assert C.softmax_flops(1, 1, 1, 1) == 6
        assert C.softmax_flops(2, 1, 1, 1) == 18

    def test_quadratic_dominance(self):
        a, b = C.softmax_flops(10**6, 2, 4, 8), C.softmax_flops(2 * 10**6, 2, 4, 8)
        assert b / a == pytest.approx(4.0, rel=1e-4)

    @pytest.mark.parametrize("args", [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 1.5, 1), (True, 1, 1, 1)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            C.softmax_flops(*args)


class TestMGKFlops:
    def test_component_example(self):
        assert C.mgk_flops(1, 2, 1, 1, 2) == 10

    def test_grouped_form_example(self):
        assert C.mgk_flops_grouped(1, 2, 1, 1, 2) == 9

    @given(pos, pos, pos)
    def test_single_component_quadratic_coefficient(self, H, D, D_x):
        f = [C.mgk_flops(n, H, D, D_x, 1) for n in (1, 2, 3)]
        assert (f[2] - 2 * f[1] + f[0]) // 2 == H * (4 * D - 1)

    def test_indivisible_heads(self):
        with pytest.raises(DomainError):
            C.mgk_flops(4, 3, 2, 2, 2)

    @given(pos, st.integers(1, 16).map(lambda h: 2 * h), pos, pos)
    def test_grouped_m2_closed_form(self, N, H, D, D_x):
        expected = N * N * H * (3 * D - Fraction(1, 2)) + N * H * D * (4 * D_x + H * D - 4)
        assert C.mgk_flops_grouped(N, H, D, D_x, 2) == expected

    @given(pos, st.integers(1, 8), pos, pos, st.integers(1, 4))
    def test_discrepancy(self, N, h, D, D_x, M):
        H = h * M
        assert C.grouping_discrepancy(N, H, D, D_x, M) == Fraction(N * H * D * (M - 1), M)


class TestParams:
    def test_softmax_examples(self):
        assert C.softmax_params(8, 32, 64) == 114688
        assert C.softmax_params(1, 1, 1) == 4

    def test_softmax_quadratic_term_scales_by_four(self):
        H, D, D_x = 3, 5, 7
        quad = lambda h: C.softmax_params(h, D, D_x) - 3 * h * D * D_x
        assert quad(2 * H) == 4 * quad(H)

    def test_mgk_examples(self):
        assert C.mgk_params(8, 32, 64) == 65544
        assert C.mgk_params(2, 1, 1) == 8
        H, D, D_x = 8, 32, 64
        saving = C.softmax_params(H, D, D_x) - C.mgk_params(H, D, D_x)
        assert saving == 49144 == H * D * D_x + (H * D) ** 2 // 2 - H

    def test_odd_heads(self):
        with pytest.raises(DomainError):
            C.mgk_params(3, 4, 4)

    @given(st.integers(1, 16).map(lambda h: 2 * h), pos, pos)
    def test_half_heads_cheaper(self, H, D, D_x):
        assert C.mgk_params(H, D, D_x) < C.softmax_params(H, D, D_x)

    @pytest.mark.parametrize("H, D, D_x, M", [(2, 3, 5, 2), (4, 2, 8, 2), (6, 2, 3, 3), (4, 4, 4, 1)])
    def test_closed_form_matches_layer(self, H, D, D_x, M):
        rng = np.random.default_rng(0)
        assert C.count_parameters(init_attention_params(C.mgk_config(H, D, D_x, M), rng)) == C.mgk_params(H, D, D_x, M)
        assert C.count_parameters(init_attention_params(C.softmax_config(H, D, D_x), rng)) == C.softmax_params(H, D, D_x)


class TestInstrumented:
    def test_softmax_small(self):
        assert C.instrumented_count(C.softmax_config(1, 1, 1), 2) == C.softmax_flops(2, 1, 1, 1) == 18

    @pytest.mark.parametrize(
        "N, H, D, D_x, M",
        [(1, 2, 1, 1, 2), (3, 2, 2, 3, 2), (5, 4, 3, 2, 2), (4, 6, 2, 5, 3), (7, 3, 2, 2, 1), (2, 8, 4, 8, 2)],
    )
    def test_mgk_grid(self, N, H, D, D_x, M):
        assert C.instrumented_count(C.mgk_config(H, D, D_x, M), N) == C.mgk_flops(N, H, D, D_x, M)

    @pytest.mark.parametrize("N, H, D, D_x", [(1, 1, 1, 1), (4, 2, 3, 5), (6, 3, 2, 4)])
    def test_softmax_grid(self, N, H, D, D_x):
        assert C.instrumented_count(C.softmax_config(H, D, D_x), N) == C.softmax_flops(N, H, D, D_x)

    def test_empty_sequence(self):
        assert C.instrumented_count(C.mgk_config(2, 2, 2, 2), 0) == 0
        assert C.instrumented_count(C.softmax_config(2, 2, 2), 0) == 0


class TestSweep:
    Ns = [64, 256, 1024]
    Ds = [16, 32, 64, 128, 256]

    def test_ratios_below_one_and_consistent(self):
        for r in C.ratio_sweep(self.Ns, self.Ds):
            assert 0 < r.flops_ratio < 1 and 0 < r.params_ratio < 1
            assert abs(r.flops_ratio - r.mgk_flops / r.softmax_flops) <= 1e-12
            assert abs(r.params_ratio - r.mgk_params / r.softmax_params) <= 1e-12

    def test_flops_ratio_decreasing_in_D(self):
        rows = C.ratio_sweep(self.Ns, self.Ds)
        for N in self.Ns:
            ratios = [r.flops_ratio for r in rows if r.N == N]
            assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_params_ratio_independent_of_N(self):
        rows = C.ratio_sweep(self.Ns, self.Ds)
        for D in self.Ds:
            assert len({r.params_ratio for r in rows if r.D == D}) == 1

    def test_empty_grid(self):
        with pytest.raises(DomainError):
            C.ratio_sweep([], [16])

    def test_csv_contract(self):
        text = C.to_csv(C.ratio_sweep([2, 3], [1, 2], H=2, M=2, instrument=True))
        rows = list(csv.DictReader(io.StringIO(text)))
        assert tuple(rows[0].keys()) == C.CSV_COLUMNS
        assert text.splitlines()[0] == "N,H,D,D_x,M,softmax_flops,mgk_flops,mgk_flops_grouped,softmax_params,mgk_params,flops_ratio,params_ratio,instrumented_flops"
        for row in rows:
            assert int(row["instrumented_flops"]) == int(row["mgk_flops"])
            assert float(row["flops_ratio"]) == int(row["mgk_flops"]) / int(row["softmax_flops"])


def test_savings_identity_exact():
    for N, H, D, D_x in itertools.product([1, 3, 17, 64, 500], [2, 4, 8, 16], [1, 7, 32, 64, 128], [1, 64]):
        saved = C.softmax_flops(N, H, D, D_x) - Fraction(C.mgk_flops_grouped(N, H, D, D_x, 2))
        assert saved == N * N * H * (D - Fraction(1, 2)) + N * H * D * (2 * D_x + H * D - 1)
