import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from prutf.diffops import (ConditioningError, DimensionError, PartitionError, block_projection,
                           build_difference_operator, difference_stencil, factor_gram, gram_solve,
                           partition_projection, segment_design)


@pytest.mark.parametrize("r, expected", [
    (0, [-1, 1]),
    (1, [1, -2, 1]),
    (2, [-1, 3, -3, 1]),
    (3, [1, -4, 6, -4, 1]),
])
def test_stencil_is_signed_binomial(r, expected):
    assert_array_equal(difference_stencil(r), expected)
    assert_array_equal(build_difference_operator(10, r).stencil, expected)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_dense_matches_repeated_first_differences(r):
    n = 12
    D = build_difference_operator(n, r)
    assert_allclose(D.dense, np.diff(np.eye(n), n=r + 1, axis=0))
    assert D.dense.shape == (n - r - 1, n)


@pytest.mark.parametrize("r", [0, 1, 3])
def test_apply_and_transpose_match_dense(r):
    rng = np.random.default_rng(r)
    D = build_difference_operator(20, r)
    y = rng.standard_normal(20)
    u = rng.standard_normal(D.m)
    assert_allclose(D.apply(y), D.dense @ y)
    assert_allclose(D.apply_transpose(u), D.dense.T @ u)
    Y = rng.standard_normal((20, 3))
    assert_allclose(D.apply(Y), D.dense @ Y)


def test_row_is_dense_row():
    D = build_difference_operator(9, 1)
    for i in range(D.m):
        assert_allclose(D.row(i), D.dense[i])
    assert D.row_norm == pytest.approx(np.sqrt(6.0))


@pytest.mark.parametrize("n, r", [(1, 0), (2, 1), (5, -1)])
def test_operator_rejects_bad_sizes(n, r):
    with pytest.raises(DimensionError):
        build_difference_operator(n, r)


@pytest.mark.parametrize("r", [0, 1, 2])
def test_gram_solve_matches_dense_solve(r):
    rng = np.random.default_rng(10 + r)
    D = build_difference_operator(30, r)
    rows = np.sort(rng.choice(D.m, 17, replace=False))
    rhs = rng.standard_normal(30)
    Ds = D.dense[rows]
    expected = np.linalg.solve(Ds @ Ds.T, Ds @ rhs)
    assert_allclose(gram_solve(D, rows, rhs), expected, rtol=1e-10, atol=1e-12)
    f = factor_gram(D, rows)
    assert_allclose(f.operator, np.linalg.solve(Ds @ Ds.T, Ds), atol=1e-12)
    assert_allclose(f.inverse_diagonal, np.diag(np.linalg.inv(Ds @ Ds.T)), rtol=1e-10)


def test_empty_row_subset_solves_to_zero():
    D = build_difference_operator(8, 0)
    f = factor_gram(D, np.array([], dtype=int))
    assert f.solve(np.zeros(0)).shape == (0,)


def test_unsorted_rows_are_rejected():
    D = build_difference_operator(8, 0)
    with pytest.raises(DimensionError):
        factor_gram(D, np.array([3, 1]))


def test_ill_conditioned_gram_is_refused(monkeypatch):
    import prutf.diffops as diffops
    monkeypatch.setattr(diffops, "CONDITION_LIMIT", 1.0)
    D = build_difference_operator(40, 2)
    with pytest.raises(ConditioningError):
        factor_gram(D, np.arange(D.m))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2), st.integers(12, 40), st.integers(0, 2**32 - 1))
def test_gram_solve_invariant(r, n, seed):
    rng = np.random.default_rng(seed)
    D = build_difference_operator(n, r)
    k = int(rng.integers(1, D.m + 1))
    rows = np.sort(rng.choice(D.m, k, replace=False))
    rhs = rng.standard_normal(n)
    x = gram_solve(D, rows, rhs)
    Ds = D.dense[rows]
    assert_allclose(Ds @ Ds.T @ x, Ds @ rhs, atol=1e-8 * (1 + np.abs(Ds @ rhs).max()))


@pytest.mark.parametrize("r", [0, 1])
def test_segment_projection_reproduces_polynomials(r):
    n = 20
    seg = segment_design(4, 15, n, r)
    t = np.arange(5, 16) / n
    poly = 2.0 - 3.0 * t if r else np.full(t.size, 2.0)
    assert_allclose(seg.P @ poly, poly, atol=1e-12)
    assert_allclose(seg.P @ seg.P, seg.P, atol=1e-12)
    assert seg.rank == r + 1


def test_short_segment_is_degenerate():
    seg = segment_design(3, 4, 10, 1)
    assert seg.degenerate
    assert seg.rank == 1
    assert_allclose(seg.P, np.eye(1))


def test_partition_projection_matches_least_squares():
    rng = np.random.default_rng(3)
    n, r = 30, 1
    y = rng.standard_normal(n)
    P = partition_projection([10, 22], n, r)
    fit = P.apply(y)
    for lo, hi in [(0, 10), (10, 22), (22, 30)]:
        t = np.arange(lo + 1, hi + 1) / n
        X = np.vander(t, 2, increasing=True)
        beta = np.linalg.lstsq(X, y[lo:hi], rcond=None)[0]
        assert_allclose(fit[lo:hi], X @ beta, atol=1e-12)
    assert P.rank == 6
    assert_allclose(P.residual(y), y - fit)
    assert_allclose(P.dense @ y, fit, atol=1e-12)


@pytest.mark.parametrize("segs", [
    [(0, 5), (6, 10)],
    [(1, 5), (5, 10)],
    [(0, 5), (5, 9)],
])
def test_block_projection_rejects_bad_partitions(segs):
    with pytest.raises(PartitionError):
        block_projection([segment_design(lo, hi, 10, 0) for lo, hi in segs])


def test_segment_rejects_empty_range():
    with pytest.raises(PartitionError):
        segment_design(5, 5, 10, 0)
