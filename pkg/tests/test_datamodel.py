import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetid.datamodel import (
    HeterogeneousDataset,
    RegressionTarget,
    StackedProblem,
    TimeSeriesExperiment,
    concatenate_problem,
    read_dataset,
    stack_problem,
    validate_dataset,
    write_dataset,
)
from oracles import dense_stack


def _exp(i, M, n_x=2, t=None, rng=None):
    rng = rng or np.random.default_rng(i)
    t = np.arange(M, dtype=float) if t is None else t
    return TimeSeriesExperiment(i, t, rng.random((M, n_x)))


def _toy(C, M, N, rng):
    dicts = [rng.standard_normal((M, N)) for _ in range(C)]
    target = RegressionTarget(tuple(rng.standard_normal(M) for _ in range(C)), 0)
    return target, dicts


class TestValidate:
    def test_valid_dataset_gives_empty_report(self):
        ds = HeterogeneousDataset((_exp(1, 5), _exp(2, 5)), 2)
        report = validate_dataset(ds)
        assert report.ok and report.violations == []

    def test_non_monotone_times_named(self):
        t = np.array([0.0, 1.0, 0.5, 2.0])
        ds = HeterogeneousDataset((_exp(1, 4), _exp(2, 4, t=t)), 2)
        report = validate_dataset(ds)
        assert not report.ok
        assert any("experiment 2" in v and "times not increasing" in v for v in report.violations)

    def test_unequal_lengths_flagged(self):
        ds = HeterogeneousDataset((_exp(1, 10), _exp(2, 12)), 2)
        assert any("unequal lengths" in v for v in validate_dataset(ds).violations)

    def test_non_finite_and_dimension_checks(self):
        bad = TimeSeriesExperiment(1, [0.0, 1.0], [[np.nan, 0.0], [1.0, 1.0]])
        ds = HeterogeneousDataset((bad, _exp(2, 2, n_x=3)), 2)
        v = validate_dataset(ds).violations
        assert any("non-finite" in s for s in v)
        assert any("n_x = 3" in s for s in v)


class TestStacking:
    def test_shapes_and_structural_nonzeros(self, rng):
        target, dicts = _toy(2, 3, 4, rng)
        P = stack_problem(target, dicts)
        assert P.y_stacked.shape == (6,)
        dense = P.dense()
        assert dense.shape == (6, 8)
        pattern = np.zeros((6, 8), dtype=bool)
        for c in range(2):
            for i in range(4):
                pattern[c * 3:(c + 1) * 3, i * 2 + c] = True
        assert pattern.sum() == 24
        assert np.all(dense[~pattern] == 0)
        np.testing.assert_array_equal(dense, dense_stack(P.A))

    def test_single_experiment_is_plain_regression(self, rng):
        target, dicts = _toy(1, 5, 3, rng)
        P = stack_problem(target, dicts)
        np.testing.assert_array_equal(P.dense(), dicts[0])
        np.testing.assert_array_equal(P.y_stacked, target.y_per_experiment[0])

    def test_unit_columns_reproduce_constants(self):
        C, M, N = 3, 4, 2
        dicts = [np.ones((M, N)) for _ in range(C)]
        target = RegressionTarget(tuple(np.zeros(M) for _ in range(C)), 0)
        P = stack_problem(target, dicts)
        W = np.zeros((N, C))
        W[0] = np.arange(1, C + 1)  # w_1^[c] = c
        brute = P.dense() @ W.reshape(-1)
        np.testing.assert_array_equal(P.matvec(W), brute)
        np.testing.assert_array_equal(brute.reshape(C, M), np.repeat(np.arange(1, C + 1.0)[:, None], M, axis=1))

    def test_dimension_mismatch(self, rng):
        target, dicts = _toy(2, 3, 4, rng)
        with pytest.raises(ValueError):
            stack_problem(target, dicts[:1])
        with pytest.raises(ValueError):
            stack_problem(target, [dicts[0], rng.standard_normal((4, 4))])

    def test_block_ordering(self, rng):
        target, dicts = _toy(3, 2, 2, rng)
        P = stack_problem(target, dicts)
        # block i varies slowest, experiment c fastest
        np.testing.assert_array_equal(P.dense()[:, 1 * 3 + 2], P.block(1)[:, 2])

    @settings(max_examples=30, deadline=None)
    @given(C=st.integers(1, 4), M=st.integers(1, 6), N=st.integers(1, 5), seed=st.integers(0, 10**6))
    def test_lossless_and_matvec(self, C, M, N, seed):
        rng = np.random.default_rng(seed)
        target, dicts = _toy(C, M, N, rng)
        P = stack_problem(target, dicts)
        ys, As = P.unstack()
        for c in range(C):
            assert np.array_equal(As[c], dicts[c])
            assert np.array_equal(ys[c], target.y_per_experiment[c])
        W = rng.standard_normal((N, C))
        per = np.concatenate([dicts[c] @ W[:, c] for c in range(C)])
        np.testing.assert_allclose(P.matvec(W), per, rtol=1e-13, atol=1e-13)
        np.testing.assert_allclose(P.rmatvec(P.y_stacked).reshape(-1), P.dense().T @ P.y_stacked, atol=1e-12)


class TestConcatenate:
    def test_shape(self, rng):
        target, dicts = _toy(2, 3, 4, rng)
        y, A = concatenate_problem(target, dicts)
        assert y.shape == (6,) and A.shape == (6, 4)

    def test_identical_experiments_same_solution(self, rng):
        A1 = rng.standard_normal((6, 3))
        y1 = rng.standard_normal(6)
        y, A = concatenate_problem(RegressionTarget((y1, y1), 0), [A1, A1])
        w_cat = np.linalg.lstsq(A, y, rcond=None)[0]
        w_one = np.linalg.lstsq(A1, y1, rcond=None)[0]
        np.testing.assert_allclose(w_cat, w_one, rtol=1e-10)

    def test_shared_weights_fit_worse_than_stacked(self, rng):
        M, N = 8, 3
        A1, A2 = rng.standard_normal((M, N)), rng.standard_normal((M, N))
        w1, w2 = np.array([1.0, -2.0, 0.5]), np.array([3.0, 0.0, -1.0])
        target = RegressionTarget((A1 @ w1, A2 @ w2), 0)
        y, A = concatenate_problem(target, [A1, A2])
        res_cat = np.linalg.lstsq(A, y, rcond=None)[1].sum()
        P = stack_problem(target, [A1, A2])
        w_st = np.linalg.lstsq(P.dense(), P.y_stacked, rcond=None)[0]
        res_st = np.sum((P.dense() @ w_st - P.y_stacked) ** 2)
        assert res_cat > res_st + 1e-6


class TestIO:
    def test_roundtrip(self, tmp_path, rng):
        exps = (_exp(1, 4, rng=rng), _exp(2, 4, rng=rng))
        ds = HeterogeneousDataset(exps, 2, 0, {"note": "x"})
        path = write_dataset(ds, tmp_path)
        manifest = json.loads(path.read_text())
        assert manifest["n_x"] == 2 and len(manifest["experiments"]) == 2
        back = read_dataset(path)
        for a, b in zip(ds.experiments, back.experiments):
            assert np.array_equal(a.states, b.states) and np.array_equal(a.times, b.times)
        assert (tmp_path / "experiment_001.csv").read_text().splitlines()[0] == "t,x1,x2"

    def test_immutable_arrays(self, rng):
        exp = _exp(1, 3, rng=rng)
        with pytest.raises(ValueError):
            exp.states[0, 0] = 1.0

    def test_stacked_problem_rejects_bad_signs(self, rng):
        with pytest.raises(ValueError):
            StackedProblem(np.zeros((1, 2)), np.zeros((1, 2, 2)), ("free", "up"))
