import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetid.datamodel import TimeSeriesExperiment
from hetid.dictionary import (
    BasisFunction,
    DictionarySpec,
    NegativeStateError,
    build_dictionary,
    hill,
    repressilator_spec,
    true_weights,
)
from hetid.simulator import GenerationConfig, RepressilatorParams, generate_dataset, repressilator_rhs


def test_hill_examples():
    assert hill(1.0, 1.0, 0, 3) == 0.5
    assert hill(2.0, 1.0, 3, 3) == pytest.approx(8 / 9, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 50), h=st.integers(1, 6))
def test_hill_partition_of_unity_unit_threshold(x, h):
    assert hill(x, 1.0, 0, h) + hill(x, 1.0, h, h) == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 50), K=st.floats(0.1, 10), h=st.integers(1, 6))
def test_hill_partition_general_threshold(x, K, h):
    # the repression form is 1/(K^h + x^h), so the identity carries a K^h factor
    assert K**h * hill(x, K, 0, h) + hill(x, K, h, h) == pytest.approx(1.0, rel=1e-12)


def test_hill_rejects_negative():
    with pytest.raises(ValueError):
        hill(-0.1, 1.0, 0, 3)


def test_default_spec_layout():
    spec = repressilator_spec()
    assert spec.N == 25
    names = spec.names
    assert names[:8] == [f"x{i}" for i in range(1, 9)]
    assert names[8:16] == [f"hill(x{i},1,0,3)" for i in range(1, 9)]
    assert names[16:24] == [f"hill(x{i},1,3,3)" for i in range(1, 9)]
    assert names[24] == "1"


def _exp(states):
    states = np.asarray(states, dtype=float)
    return TimeSeriesExperiment(1, np.arange(len(states), dtype=float), states)


def test_build_dictionary_columns():
    rng = np.random.default_rng(0)
    states = rng.uniform(0.1, 3, (7, 8))
    states[3, 7] = 1.0
    dm = build_dictionary(_exp(states), repressilator_spec(), rows=np.arange(1, 6))
    assert dm.values.shape == (5, 25)
    np.testing.assert_array_equal(dm.values[:, 24], 1.0)
    np.testing.assert_array_equal(dm.values[:, :8], states[1:6])
    assert dm.values[2, 15] == 0.5  # row 3 of the data, hill(x8,1,0,3)
    np.testing.assert_array_equal(dm.rows, np.arange(1, 6))


def test_negative_states_clamped_or_rejected():
    states = np.full((3, 8), 0.5)
    states[1, 2] = -0.01
    dm = build_dictionary(_exp(states), repressilator_spec())
    assert dm.n_clamped == 1
    assert dm.values[1, 2] == -0.01  # linear term keeps the raw value
    assert dm.values[1, 8 + 2] == 1.0  # repression at clamped x = 0
    with pytest.raises(NegativeStateError):
        build_dictionary(_exp(states), repressilator_spec(), strict=True)


def test_spec_json_roundtrip_and_kinds():
    spec = DictionarySpec((BasisFunction("mass_action", {"states": (0, 1)}),
                           BasisFunction("michaelis_menten", {"state": 1, "K": 2.0}),
                           BasisFunction("constant")))
    back = DictionarySpec.from_json(spec.to_json())
    assert back == spec
    dm = build_dictionary(_exp([[1.0, 2.0], [3.0, 2.0]]), spec)
    np.testing.assert_allclose(dm.values, [[2.0, 0.5, 1.0], [6.0, 0.5, 1.0]])
    with pytest.raises(ValueError):
        spec.check(1)
    with pytest.raises(ValueError):
        BasisFunction("hill", {"state": 0, "K": 1, "h_num": 1, "h_den": 3})


def test_true_weights_mean_params_state1():
    w = true_weights(RepressilatorParams.mean(), repressilator_spec(), 0)
    names = repressilator_spec().names
    nz = {names[i]: w[i] for i in np.flatnonzero(w)}
    assert nz == {"hill(x8,1,0,3)": 40.0, "x1": -1.0, "1": 0.5}


def test_true_weights_reproduce_rhs():
    ds = generate_dataset(GenerationConfig(C=2, t_end=10, seed=3, perturbed=(0, 3, 4)))
    spec = repressilator_spec()
    for exp in ds.experiments:
        params = RepressilatorParams(np.asarray(exp.meta["params"]))
        A = build_dictionary(exp, spec).values
        rhs = np.array([repressilator_rhs(x, params) for x in exp.states])
        for n in range(8):
            w = true_weights(params, spec, n)
            assert np.count_nonzero(w) == 3
            np.testing.assert_allclose(A @ w, rhs[:, n], rtol=1e-12, atol=1e-12)


def test_true_weights_rejects_other_spec():
    with pytest.raises(ValueError):
        true_weights(RepressilatorParams.mean(), DictionarySpec((BasisFunction("constant"),)), 0)
