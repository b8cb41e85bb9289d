import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specunmix.cone import (
    MixingEstimate,
    RowScore,
    estimate_source_count,
    nnls,
    score_rows,
    select_vertices,
)
from specunmix.spectra import SpectraError

SQRT2_OVER_2 = 0.7071067811865476


def test_nnls_interior_target():
    lam, resid = nnls(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([3.0, 4.0]))
    assert np.allclose(lam, [3.0, 4.0], atol=1e-10)
    assert resid == pytest.approx(0.0, abs=1e-10)


def test_nnls_orthogonal_target():
    lam, resid = nnls(np.array([[1.0, 0.0]]), np.array([0.0, 1.0]))
    assert np.allclose(lam, [0.0])
    assert resid == pytest.approx(1.0)


def test_nnls_oblique_target():
    # minimize (l1+l2)^2 + (l2-1)^2 over l >= 0: l = (0, 1/2), residual sqrt(2)/2
    lam, resid = nnls(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([0.0, 1.0]))
    assert np.allclose(lam, [0.0, 0.5], atol=1e-10)
    assert resid == pytest.approx(SQRT2_OVER_2, abs=1e-10)


def test_nnls_matches_scipy_on_random_instances():
    scipy_opt = pytest.importorskip("scipy.optimize")
    rng = np.random.default_rng(0)
    for _ in range(40):
        k, m = rng.integers(1, 8), rng.integers(1, 8)
        B = rng.normal(size=(k, m))
        y = rng.normal(size=m)
        lam, resid = nnls(B, y)
        _, resid_ref = scipy_opt.nnls(B.T, y)
        assert resid == pytest.approx(resid_ref, abs=1e-8)
        assert np.all(lam >= 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nnls_residual_never_exceeds_target_norm(seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(rng.integers(1, 6), rng.integers(1, 6)))
    y = rng.normal(size=B.shape[1])
    _, resid = nnls(B, y)
    assert resid <= np.linalg.norm(y) + 1e-12


def test_nnls_dimension_mismatch():
    with pytest.raises(SpectraError):
        nnls(np.ones((2, 3)), np.ones(2))


def test_score_rows_triangle():
    R = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    scores = {rs.row_index: rs.score for rs in score_rows(R)}
    assert scores[0] == pytest.approx(SQRT2_OVER_2, abs=1e-8)
    assert scores[1] == pytest.approx(SQRT2_OVER_2, abs=1e-8)
    assert scores[2] == pytest.approx(0.0, abs=1e-8)


def test_score_rows_duplicates_score_zero():
    R = np.array([[2.0, 1.0], [2.0, 1.0], [0.0, 3.0]])
    scores = {rs.row_index: rs.score for rs in score_rows(R)}
    assert scores[0] == pytest.approx(0.0, abs=1e-10)
    assert scores[1] == pytest.approx(0.0, abs=1e-10)


def test_score_rows_zero_row_scores_zero():
    R = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    scores = {rs.row_index: rs.score for rs in score_rows(R)}
    assert scores[1] == 0.0


def test_score_rows_rejects_negative_or_tiny():
    with pytest.raises(SpectraError):
        score_rows(np.array([[1.0, -0.1], [0.0, 1.0]]))
    with pytest.raises(SpectraError):
        score_rows(np.array([[1.0, 1.0]]))


def test_interior_rows_score_below_tolerance():
    rng = np.random.default_rng(8)
    vertices = rng.uniform(0.2, 1.0, size=(2, 6))
    weights = rng.uniform(0.0, 1.0, size=(30, 2))
    R = np.vstack([vertices, weights @ vertices])
    scores = score_rows(R)
    for rs in scores[2:]:
        assert rs.score <= 1e-8


def test_scores_invariant_under_row_permutation():
    rng = np.random.default_rng(15)
    R = rng.uniform(0.0, 1.0, size=(12, 4))
    base = np.array([rs.score for rs in score_rows(R)])
    perm = rng.permutation(12)
    permuted = np.array([rs.score for rs in score_rows(R[perm])])
    assert np.allclose(base[perm], permuted, atol=1e-7)


def test_select_vertices_top_two():
    R = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    est = select_vertices(score_rows(R), R, 2)
    assert set(est.source_indices) == {0, 1}
    assert np.allclose(sorted(est.scores, reverse=True), est.scores)
    for idx, row in zip(est.source_indices, est.rows):
        assert np.array_equal(row, R[idx])


def test_select_vertices_tie_breaks_low_index():
    scores = [RowScore(0, 1.0), RowScore(1, 1.0), RowScore(2, 1.0)]
    R = np.eye(3)
    est = select_vertices(scores, R, 1)
    assert est.source_indices == (0,)


def test_select_vertices_all_rows():
    R = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    est = select_vertices(score_rows(R), R, 3)
    assert sorted(est.source_indices) == [0, 1, 2]


def test_select_vertices_range_check():
    R = np.eye(2)
    scores = score_rows(R)
    with pytest.raises(SpectraError):
        select_vertices(scores, R, 0)
    with pytest.raises(SpectraError):
        select_vertices(scores, R, 3)


def test_mixing_estimate_invariants():
    with pytest.raises(SpectraError):
        MixingEstimate(np.eye(2), (0, 0), (1.0, 0.5))
    with pytest.raises(SpectraError):
        MixingEstimate(np.eye(2), (0, 1), (0.5, 1.0))  # not sorted descending


def test_estimate_source_count_ratio_gap():
    scores = [RowScore(i, s) for i, s in enumerate([10.0, 9.5, 0.01, 0.009])]
    assert estimate_source_count(scores, 4) == 2


def test_estimate_source_count_equal_scores():
    scores = [RowScore(i, 5.0) for i in range(6)]
    assert estimate_source_count(scores, 4) == 1


def test_estimate_source_count_degenerate():
    assert estimate_source_count([RowScore(0, 1.0)], 4) == 1
    assert estimate_source_count([RowScore(0, 0.0), RowScore(1, 0.0)], 4) == 1


def test_estimate_source_count_respects_cap():
    scores = [RowScore(i, s) for i, s in enumerate([8.0, 7.0, 6.0, 0.001, 0.0001])]
    assert estimate_source_count(scores, 4) == 3
    assert estimate_source_count(scores, 2) <= 2


def test_exact_recovery_on_synthetic_benchmark():
    from specunmix import synth

    bench = synth.gen_benchmark(benchmark=1, seed=3)
    W0 = bench.truth.sources.values
    M0 = bench.truth.mixing
    R = W0 @ M0
    scores = score_rows(R)
    est = select_vertices(scores, R, 2)
    assert set(est.source_indices) == set(bench.truth.witness_indices)
    for row in est.rows:
        unit = row / np.linalg.norm(row)
        err = min(
            np.linalg.norm(unit - M0[k] / np.linalg.norm(M0[k])) for k in range(2)
        )
        assert err <= 1e-6
