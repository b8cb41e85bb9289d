import numpy as np
import pytest

from specunmix.fitting import (
    FitDimensionError,
    box_constrained_ls,
    compute_residual,
)
from specunmix.spectra import ConcentrationBounds, MixtureMatrix, SpectralGrid


def mk_mixture(values):
    values = np.asarray(values, dtype=float)
    grid = SpectralGrid(np.arange(values.shape[0], dtype=float))
    return MixtureMatrix.from_values(grid, values, list(range(values.shape[1])))


def test_scalar_clamp():
    # unconstrained optimum 2.5 sits outside the box and clips to 2
    X = mk_mixture(np.array([[10.0], [0.0]]))
    A = np.array([[2.0], [0.0]])
    S = box_constrained_ls(X, A, ["a"], ConcentrationBounds({"a": 2.0}))
    assert S.values[0, 0] == pytest.approx(2.0, abs=1e-10)


def test_interior_recovery():
    rng = np.random.default_rng(11)
    A = rng.uniform(0.0, 1.0, size=(60, 3))
    S0 = rng.uniform(0.1, 0.6, size=(3, 4))
    X = mk_mixture(A @ S0)
    bounds = ConcentrationBounds({"a": 1.0, "b": 1.0, "c": 1.0})
    S = box_constrained_ls(X, A, ["a", "b", "c"], bounds)
    assert S.converged
    assert np.max(np.abs(S.values - S0)) <= 1e-6 * max(1.0, np.max(np.abs(S0)))


def test_all_zero_bounds():
    rng = np.random.default_rng(3)
    A = rng.uniform(size=(10, 2))
    X = mk_mixture(rng.uniform(size=(10, 3)))
    bounds = ConcentrationBounds({"a": 0.0, "b": 0.0})
    S = box_constrained_ls(X, A, ["a", "b"], bounds)
    assert np.array_equal(S.values, np.zeros((2, 3)))
    R = compute_residual(X, A, S)
    assert np.array_equal(R.values, X.values)


def test_feasibility_and_random_point_optimality():
    rng = np.random.default_rng(7)
    A = rng.uniform(size=(40, 3))
    X = mk_mixture(rng.uniform(size=(40, 2)))
    upper = {"a": 0.4, "b": 0.7, "c": 0.2}
    bounds = ConcentrationBounds(upper)
    S = box_constrained_ls(X, A, ["a", "b", "c"], bounds)
    ub = np.array([0.4, 0.7, 0.2])
    assert np.all(S.values >= -1e-12)
    assert np.all(S.values <= ub[:, None] + 1e-12)
    best = np.linalg.norm(X.values - A @ S.values) ** 2
    for _ in range(1000):
        trial = rng.uniform(size=(3, 2)) * ub[:, None]
        assert np.linalg.norm(X.values - A @ trial) ** 2 >= best - 1e-9


def test_total_bound_projection():
    rng = np.random.default_rng(5)
    A = rng.uniform(size=(30, 2))
    X = mk_mixture(A @ np.array([[0.9], [0.9]]))
    bounds = ConcentrationBounds({"a": 1.0, "b": 1.0}, total_bound=0.5)
    S = box_constrained_ls(X, A, ["a", "b"], bounds)
    assert np.all(S.values.sum(axis=0) <= 0.5 + 1e-9)
    best = np.linalg.norm(X.values - A @ S.values) ** 2
    # optimum beats random feasible points of the capped simplex
    for _ in range(500):
        trial = rng.uniform(size=(2, 1))
        trial *= 0.5 / max(trial.sum(), 0.5)
        assert np.linalg.norm(X.values - A @ trial) ** 2 >= best - 1e-9


def test_total_bound_subset_members():
    rng = np.random.default_rng(9)
    A = rng.uniform(size=(30, 3))
    S0 = np.array([[0.4], [0.3], [2.0]])
    X = mk_mixture(A @ S0)
    bounds = ConcentrationBounds(
        {"a": 1.0, "b": 1.0, "c": 5.0}, total_bound=0.7, total_members=("a", "b")
    )
    S = box_constrained_ls(X, A, ["a", "b", "c"], bounds)
    assert S.values[:2].sum(axis=0).max() <= 0.7 + 1e-9
    # the non-member is free to exceed the cap
    assert np.max(np.abs(S.values - S0)) <= 1e-6


def test_uniqueness_on_full_rank():
    rng = np.random.default_rng(13)
    A = rng.normal(size=(25, 3)) ** 2
    X = mk_mixture(rng.uniform(size=(25, 2)))
    bounds = ConcentrationBounds({"a": 0.9, "b": 0.9, "c": 0.9})
    S1 = box_constrained_ls(X, A, ["a", "b", "c"], bounds, tol=1e-10)
    S2 = box_constrained_ls(X, A, ["a", "b", "c"], bounds, tol=1e-12)
    denom = max(np.linalg.norm(S1.values), 1e-30)
    assert np.linalg.norm(S1.values - S2.values) / denom <= 1e-8


def test_bound_one_third_scenario():
    from specunmix import synth

    bench = synth.gen_benchmark(benchmark=1, seed=5)
    A = bench.library.matrix(bench.known_names)
    S = box_constrained_ls(bench.mixture, A, bench.known_names, bench.bounds)
    assert np.all(S.values <= 1.0 / 3.0 + 1e-12)


def test_residual_exactness_and_stats():
    rng = np.random.default_rng(2)
    A = rng.uniform(size=(20, 2))
    S0 = rng.uniform(0.1, 0.5, size=(2, 3))
    X = mk_mixture(A @ S0)
    S = box_constrained_ls(X, A, ["a", "b"], ConcentrationBounds({"a": 1.0, "b": 1.0}))
    R = compute_residual(X, A, S, clamp=False)
    recon = A @ S.values + R.values
    assert np.linalg.norm(recon - X.values) <= 1e-12 * np.linalg.norm(X.values)
    assert R.negative_fraction <= 0.5  # residual is numerically tiny either sign
    assert np.linalg.norm(R.values) <= 1e-8


def test_residual_zero_case_and_identity():
    rng = np.random.default_rng(4)
    A = rng.uniform(size=(15, 2))
    S0 = rng.uniform(0.1, 0.4, size=(2, 2))
    X = mk_mixture(A @ S0)
    from specunmix.fitting import ConcentrationMatrix

    S_exact = ConcentrationMatrix(S0, ("a", "b"), ConcentrationBounds({"a": 1.0, "b": 1.0}))
    R = compute_residual(X, A, S_exact)
    assert np.allclose(R.values, 0.0, atol=1e-14)
    assert R.negative_fraction <= 0.5

    S_zero = ConcentrationMatrix(
        np.zeros_like(S0), ("a", "b"), ConcentrationBounds({"a": 1.0, "b": 1.0})
    )
    R2 = compute_residual(X, A, S_zero)
    assert np.array_equal(R2.values, X.values)
    assert R2.negative_fraction == 0.0


def test_residual_clamp_records_stats_first():
    from specunmix.fitting import ConcentrationMatrix

    grid_vals = np.array([[1.0], [1.0]])
    X = mk_mixture(grid_vals)
    A = np.array([[2.0], [0.5]])
    S = ConcentrationMatrix(np.array([[1.0]]), ("a",), ConcentrationBounds({"a": 1.0}))
    R = compute_residual(X, A, S, clamp=True)
    assert np.all(R.values >= 0.0)
    assert R.negative_fraction == pytest.approx(0.5)
    assert R.negative_min == pytest.approx(-1.0)


def test_box_keeps_residual_nonnegative_when_truth_saturates():
    # ground truth sits on the bound and the leftover is nonnegative, so the
    # clipped fit leaves exactly that nonnegative leftover
    rng = np.random.default_rng(21)
    a = rng.uniform(0.1, 1.0, size=30)
    extra = rng.uniform(0.0, 0.3, size=30)
    bound = 0.5
    X = mk_mixture((a * bound + extra)[:, None])
    S = box_constrained_ls(X, a[:, None], ["a"], ConcentrationBounds({"a": bound}))
    assert S.values[0, 0] == pytest.approx(bound, abs=1e-10)
    R = compute_residual(X, a[:, None], S)
    assert R.negative_fraction == 0.0
    assert np.all(R.values >= -1e-12)


def test_dimension_mismatch_errors():
    X = mk_mixture(np.ones((5, 2)))
    with pytest.raises(FitDimensionError):
        box_constrained_ls(X, np.ones((4, 1)), ["a"], ConcentrationBounds({"a": 1.0}))
    with pytest.raises(FitDimensionError):
        box_constrained_ls(X, np.ones((5, 2)), ["a"], ConcentrationBounds({"a": 1.0}))
