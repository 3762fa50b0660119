import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentcore.errors import DimensionMismatchError, ModeIndexError, RankError, SVDError
from latentcore.tensor import (
    Unfolding,
    frobenius_norm,
    hooi,
    hosvd,
    jacobi_svd,
    left_singular_vectors,
    mode_product,
    multi_mode_product,
    refold,
    tucker_reconstruct,
    unfold,
)
from oracles import frobenius_loops, mode_product_loops, relative_error, unfold_loops

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)


@st.composite
def tensor_and_mode(draw):
    shape = draw(shapes)
    x = draw(arrays(np.float64, shape, elements=st.floats(-10, 10)))
    n = draw(st.integers(0, len(shape) - 1))
    return x, n


class TestModeProduct:
    def test_identity_leaves_tensor_unchanged(self, rng):
        x = rng.standard_normal((3, 4, 5))
        np.testing.assert_array_equal(mode_product(x, np.eye(4), 1), x)

    def test_ones_sum(self):
        out = mode_product(np.ones((2, 2, 2)), np.ones((1, 2)), 0)
        assert out.shape == (1, 2, 2)
        np.testing.assert_array_equal(out, 2.0)

    def test_matches_loop_oracle(self, rng):
        x = rng.standard_normal((3, 4, 2))
        m = rng.standard_normal((5, 4))
        assert relative_error(mode_product(x, m, 1), mode_product_loops(x, m, 1)) <= 1e-12

    def test_column_mismatch(self, rng):
        with pytest.raises(DimensionMismatchError):
            mode_product(rng.standard_normal((3, 4)), rng.standard_normal((2, 3)), 1)

    @pytest.mark.parametrize("n", [-1, 3, 10])
    def test_bad_mode(self, n):
        with pytest.raises(ModeIndexError):
            mode_product(np.zeros((2, 2, 2)), np.eye(2), n)

    def test_mode_errors_are_index_errors(self):
        with pytest.raises(IndexError):
            unfold(np.zeros(3), 1)

    @given(st.integers(0, 2**32 - 1))
    def test_distinct_modes_commute(self, seed):
        g = np.random.default_rng(seed)
        x = g.standard_normal((3, 2, 4))
        m1, m2 = g.standard_normal((5, 3)), g.standard_normal((2, 4))
        a = mode_product(mode_product(x, m1, 0), m2, 2)
        b = mode_product(mode_product(x, m2, 2), m1, 0)
        assert relative_error(a, b) <= 1e-10

    @given(st.integers(0, 2**32 - 1))
    def test_same_mode_composes(self, seed):
        g = np.random.default_rng(seed)
        x = g.standard_normal((2, 3, 4))
        m1, m2 = g.standard_normal((5, 3)), g.standard_normal((2, 5))
        a = mode_product(mode_product(x, m1, 1), m2, 1)
        assert relative_error(a, mode_product(x, m2 @ m1, 1)) <= 1e-10

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_bilinear(self, seed, a, b):
        g = np.random.default_rng(seed)
        x, y = g.standard_normal((2, 3, 2)), g.standard_normal((2, 3, 2))
        m, k = g.standard_normal((4, 3)), g.standard_normal((4, 3))
        lhs = mode_product(a * x + b * y, m, 1)
        rhs = a * mode_product(x, m, 1) + b * mode_product(y, m, 1)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)
        lhs = mode_product(x, a * m + b * k, 1)
        rhs = a * mode_product(x, m, 1) + b * mode_product(x, k, 1)
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    def test_inputs_not_modified(self, rng):
        x = rng.standard_normal((2, 3))
        m = rng.standard_normal((2, 3))
        x0, m0 = x.copy(), m.copy()
        mode_product(x, m, 1)
        np.testing.assert_array_equal(x, x0)
        np.testing.assert_array_equal(m, m0)


class TestUnfold:
    @given(tensor_and_mode())
    def test_round_trip_bit_exact(self, xn):
        x, n = xn
        np.testing.assert_array_equal(refold(unfold(x, n)), x)

    def test_matrix_case(self, rng):
        x = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(unfold(x, 0).matrix, x)

    def test_enumeration_oracle(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        for n in range(3):
            np.testing.assert_array_equal(unfold(x, n).matrix, unfold_loops(x, n))
        # mode 1: columns enumerate (i0, i2) with i2 fastest
        np.testing.assert_array_equal(unfold(x, 1).matrix, [[0, 1, 4, 5], [2, 3, 6, 7]])

    def test_unfolding_record(self, rng):
        x = rng.standard_normal((2, 3, 4))
        u = unfold(x, 2)
        assert isinstance(u, Unfolding)
        assert u.source_shape == (2, 3, 4) and u.mode == 2 and u.matrix.shape == (4, 6)
        np.testing.assert_array_equal(u.refold(), x)

    def test_refold_shape_check(self):
        with pytest.raises(DimensionMismatchError):
            refold(Unfolding((2, 3), 0, np.zeros((2, 2))))

    def test_mode_product_via_unfolding(self, rng):
        x = rng.standard_normal((3, 4, 2))
        m = rng.standard_normal((5, 4))
        expect = refold(Unfolding((3, 5, 2), 1, m @ unfold(x, 1).matrix))
        assert relative_error(mode_product(x, m, 1), expect) <= 1e-12


class TestTuckerReconstruct:
    def test_identity_factors(self, rng):
        core = rng.standard_normal((2, 3, 4))
        out = tucker_reconstruct(core, [np.eye(2), np.eye(3), np.eye(4)])
        np.testing.assert_array_equal(out, core)

    def test_any_mode_order(self, rng):
        core = rng.standard_normal((2, 2, 2))
        fs = [rng.standard_normal((2, 2)) for _ in range(3)]
        ref = tucker_reconstruct(core, fs)
        alt = multi_mode_product(core, [fs[2], fs[0], fs[1]], [2, 0, 1])
        assert relative_error(ref, alt) <= 1e-12

    def test_zero_core(self, rng):
        fs = [rng.standard_normal((d, 2)) for d in (3, 4, 5)]
        out = tucker_reconstruct(np.zeros((2, 2, 2)), fs)
        assert out.shape == (3, 4, 5)
        assert not out.any()

    def test_factor_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            tucker_reconstruct(np.zeros((2, 2)), [np.eye(2), np.eye(3)])
        with pytest.raises(DimensionMismatchError):
            tucker_reconstruct(np.zeros((2, 2)), [np.eye(2)])


class TestFrobenius:
    def test_zero(self):
        assert frobenius_norm(np.zeros((3, 3))) == 0.0

    def test_identity(self):
        assert frobenius_norm(np.eye(2)) == pytest.approx(np.sqrt(2), abs=1e-15)

    def test_loop_oracle(self, rng):
        x = rng.standard_normal((3, 4, 5))
        assert abs(frobenius_norm(x) - frobenius_loops(x)) <= 1e-12 * frobenius_loops(x)


class TestSVD:
    @pytest.mark.parametrize("shape", [(5, 3), (3, 7), (6, 6), (1, 4), (4, 1)])
    def test_jacobi_reconstructs(self, rng, shape):
        a = rng.standard_normal(shape)
        u, s, vt = jacobi_svd(a)
        assert u.shape == (shape[0], shape[0])
        np.testing.assert_allclose(u.T @ u, np.eye(shape[0]), atol=1e-12)
        k = min(shape)
        np.testing.assert_allclose((u[:, :k] * s[:k]) @ vt[:k], a, atol=1e-12)
        np.testing.assert_allclose(s[:k], np.linalg.svd(a, compute_uv=False), rtol=1e-12)

    def test_jacobi_rank_deficient(self):
        a = np.outer([1.0, 2.0, 3.0], [1.0, -1.0, 0.5, 2.0])
        u, s, vt = jacobi_svd(a)
        assert np.all(np.isfinite(u))
        np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-12)
        assert s[1] <= 1e-12 * s[0]

    def test_backends_agree(self, rng):
        a = rng.standard_normal((4, 9))
        u_np = left_singular_vectors(a, 4, "numpy")
        u_j = left_singular_vectors(a, 4, "jacobi")
        np.testing.assert_allclose(u_np, u_j, atol=1e-10)

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            left_singular_vectors(np.eye(2), 1, "magic")


class TestHosvd:
    @pytest.mark.parametrize("backend", ["numpy", "jacobi"])
    def test_full_rank_exact(self, rng, backend):
        x = rng.standard_normal((4, 4, 3, 3, 2, 2))
        res = hosvd(x, x.shape, backend)
        assert relative_error(res.to_tensor(), x) <= 1e-10
        assert res.relative_error <= 1e-7
        for f in res.factors:
            assert np.linalg.norm(f.T @ f - np.eye(f.shape[1])) <= 1e-8

    def test_rank_one_exact(self, rng):
        vs = [rng.standard_normal(d) for d in (3, 4, 5)]
        x = np.einsum("i,j,k->ijk", *vs)
        core, factors = hosvd(x, (1, 1, 1))
        assert relative_error(tucker_reconstruct(core, factors), x) <= 1e-10

    def test_truncation_error_reported(self, rng):
        x = rng.standard_normal((4, 5, 3))
        res = hosvd(x, (2, 3, 2))
        actual = np.linalg.norm(res.to_tensor() - x) / np.linalg.norm(x)
        assert res.relative_error == pytest.approx(actual, rel=1e-9)
        assert res.relative_error > 0

    def test_local_optimality_by_perturbation(self, rng):
        """No nearby orthonormal factor set reconstructs better than HOSVD+HOOI."""
        x = rng.standard_normal((5, 4, 3))
        ranks = (2, 2, 2)
        res = hooi(x, ranks, n_iter=20)

        def err(factors):
            core = multi_mode_product(x, [f.T for f in factors])
            return np.linalg.norm(tucker_reconstruct(core, factors) - x)

        best = err(res.factors)
        for _ in range(200):
            trial = []
            for f in res.factors:
                q, _ = np.linalg.qr(f + 1e-3 * rng.standard_normal(f.shape))
                trial.append(q)
            assert err(trial) >= best - 1e-12

    def test_hooi_zero_iterations_is_hosvd(self, rng):
        x = rng.standard_normal((3, 4, 2))
        a, b = hosvd(x, (2, 2, 1)), hooi(x, (2, 2, 1), n_iter=0)
        np.testing.assert_array_equal(a.core, b.core)

    def test_hooi_never_worse(self, rng):
        x = rng.standard_normal((5, 5, 4))
        assert hooi(x, (2, 2, 2), 5).relative_error <= hosvd(x, (2, 2, 2)).relative_error + 1e-12

    def test_iterates_as_pair(self, rng):
        x = rng.standard_normal((2, 3))
        core, factors = hosvd(x, (2, 2))
        assert core.shape == (2, 2) and len(factors) == 2

    @pytest.mark.parametrize("ranks", [(3, 2), (0, 2), (2,)])
    def test_rank_errors(self, ranks):
        with pytest.raises(RankError):
            hosvd(np.ones((2, 3)), ranks)

    def test_svd_failure_reports_mode(self):
        x = np.ones((2, 2, 2))
        x[1, 1, 1] = np.nan
        with pytest.raises(SVDError) as info:
            hosvd(x, (1, 1, 1))
        assert info.value.mode == 0
