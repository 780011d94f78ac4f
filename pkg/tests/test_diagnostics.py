import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgk import diagnostics as Dg
from mgk import kernels as K
from mgk.exceptions import ContractError, DimensionError, EmptyInputError
from mgk.model import ModelSpec, Network

from oracles import rank_row_reduction


def planted(rng, n, r, low=-3, high=4):
    return rng.integers(low, high, (n, r)) @ rng.integers(low, high, (r, n))


class TestMatrixRank:
    def test_identity(self):
        assert Dg.matrix_rank(np.eye(4), 1e-6) == 4

    def test_outer_product(self):
        assert Dg.matrix_rank(np.outer([1.0, -2.0, 3.0], [0.5, 4.0, 1.0])) == 1

    def test_two_rank_three_factors(self):
        rng = np.random.default_rng(0)
        a = planted(rng, 8, 3)
        assert Dg.matrix_rank(a) == rank_row_reduction(a) == 3

    def test_agrees_with_row_reduction(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n = int(rng.integers(1, 13))
            a = planted(rng, n, int(rng.integers(1, n + 1)))
            assert Dg.matrix_rank(a) == rank_row_reduction(a)

    def test_zero_matrix(self):
        assert Dg.matrix_rank(np.zeros((5, 5))) == 0

    def test_non_square(self):
        with pytest.raises(DimensionError):
            Dg.matrix_rank(np.ones((3, 4)))

    @pytest.mark.parametrize("shape", [(5, 5), (7, 3), (3, 7), (1, 1), (12, 12)])
    def test_singular_values_match_reference(self, shape):
        a = np.random.default_rng(2).standard_normal(shape)
        np.testing.assert_allclose(Dg.singular_values(a), np.linalg.svd(a, compute_uv=False), rtol=1e-10, atol=1e-12)

    @given(st.integers(1, 10), st.integers(1, 10), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1))
    def test_permutation_and_scale_invariance(self, n, r, scale, seed):
        rng = np.random.default_rng(seed)
        a = planted(rng, n, min(r, n)).astype(float)
        base = Dg.matrix_rank(a)
        assert Dg.matrix_rank(a[rng.permutation(n)][:, rng.permutation(n)]) == base
        assert Dg.matrix_rank(a * scale) == base
        assert 0 <= base <= n


def _model(variant="softmax", heads=2, n=16):
    spec = ModelSpec(variant=variant, n_layers=2, embed_dim=8, ffn_dim=8, n_heads=heads, n_tokens=10, n_classes=4, max_len=n)
    return Network(spec, np.random.default_rng(0))


class TestRankDistribution:
    tokens = np.random.default_rng(3).integers(0, 10, (20, 16))

    @pytest.mark.parametrize("variant", ["softmax", "mgk", "linear"])
    def test_bounds(self, variant):
        hists = Dg.rank_distribution(_model(variant), self.tokens, count=5, seed=1)
        assert len(hists) == 4
        for h in hists:
            assert len(h.ranks) == 5
            assert all(1 <= r <= 16 for r in h.ranks)
            assert h.threshold == Dg.RANK_THRESHOLD

    def test_deterministic(self):
        a = Dg.rank_report_json(Dg.rank_distribution(_model(), self.tokens, count=7, seed=4))
        b = Dg.rank_report_json(Dg.rank_distribution(_model(), self.tokens, count=7, seed=4))
        assert a == b

    def test_empty_sample(self):
        with pytest.raises(EmptyInputError):
            Dg.rank_distribution(_model(), np.zeros((0, 16), dtype=int))


class TestHeadSimilarity:
    def test_identical_heads(self):
        a = np.random.default_rng(0).random((4, 4))
        np.testing.assert_array_equal(Dg.head_similarity([a, a.copy(), a]), np.zeros((3, 3)))

    def test_against_loop(self):
        rng = np.random.default_rng(1)
        mats = [rng.random((3, 5)) for _ in range(3)]
        got = Dg.head_similarity(mats)
        np.testing.assert_allclose(got, got.T)
        for i in range(3):
            for j in range(3):
                acc = sum(abs(mats[i][r, c] - mats[j][r, c]) for r in range(3) for c in range(5)) / 15
                assert got[i, j] == pytest.approx(acc, rel=1e-14, abs=1e-300)

    def test_zero_iff_identical(self):
        a = np.eye(3)
        b = a.copy()
        b[0, 1] = 1e-9
        assert Dg.head_similarity([a, b])[0, 1] > 0

    def test_needs_two_heads(self):
        with pytest.raises(ContractError):
            Dg.head_similarity([np.eye(2)])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Dg.head_similarity([np.eye(2), np.eye(3)])


class TestDumpAttention:
    def test_uniform_two_by_two(self, tmp_path):
        out = K.softmax_attention(np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2))
        (path,) = Dg.dump_attention(out, tmp_path)
        assert open(path).read() == "0.5,0.5\n0.5,0.5"

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        outs = [K.gaussian_attention(rng.standard_normal((6, 2)), rng.standard_normal((6, 2)), np.eye(6), 1.3) for _ in range(2)]
        paths = Dg.dump_attention(outs, tmp_path)
        assert [os.path.basename(p) for p in paths] == ["attention_head0.csv", "attention_head1.csv"]
        for p, o in zip(paths, outs):
            np.testing.assert_array_equal(Dg.load_attention(p), o.scores.data)

    def test_causal_upper_triangle_zero(self, tmp_path):
        rng = np.random.default_rng(1)
        out = K.softmax_attention(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), np.eye(3), causal=True)
        (path,) = Dg.dump_attention(out, tmp_path)
        rows = [line.split(",") for line in open(path).read().split("\n")]
        assert rows[0][1:] == ["0", "0"] and rows[1][2] == "0"

    def test_unmaterialized(self, tmp_path):
        out = K.linear_attention(np.ones((2, 1)), np.ones((2, 1)), np.eye(2))
        with pytest.raises(ContractError):
            Dg.dump_attention(out, tmp_path)

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        out = K.softmax_attention(np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2))
        with pytest.raises(OSError):
            Dg.dump_attention(out, blocker / "sub")
