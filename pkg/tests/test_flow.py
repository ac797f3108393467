import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_dnf.flow import (BaseParams, apply_stack, base_log_prob, deterministic_flow_nll,
                             intermediate_states, threshold, xor_transform)
from latent_dnf.nn import ContractViolation

bits = st.lists(st.integers(0, 1), min_size=1, max_size=12)


@given(bits, st.data())
def test_xor_is_an_involution(a, data):
    u = data.draw(st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
    np.testing.assert_array_equal(xor_transform(xor_transform(a, u), u), a)


def test_xor_example():
    np.testing.assert_array_equal(xor_transform([1, 0, 1, 1], [0, 1, 1, 0]), [1, 1, 0, 1])


def test_xor_length_mismatch():
    with pytest.raises(ContractViolation):
        xor_transform([1, 0], [1, 0, 1])


def test_intermediate_states_and_stack():
    x = np.array([1, 0, 1])
    u = np.array([[1, 1, 0], [0, 1, 1]])
    states = intermediate_states(x, u)
    np.testing.assert_array_equal(states, [[1, 0, 1], [0, 1, 1], [0, 0, 0]])
    np.testing.assert_array_equal(apply_stack(x, u), [0, 0, 0])


def test_empty_stack_is_identity():
    x = np.array([[1, 0, 1]])
    np.testing.assert_array_equal(apply_stack(x, np.zeros((1, 0, 3))), x)


@pytest.mark.parametrize("y,expected", [
    ([1, 1], 2 * np.log(0.1)),
    ([0, 0], 2 * np.log(0.9)),
    ([1, 0], np.log(0.1) + np.log(0.9)),
])
def test_base_log_prob(y, expected):
    per_dim, total = base_log_prob(np.array(y), BaseParams.constant(2))
    assert total == pytest.approx(expected)
    assert per_dim.sum() == pytest.approx(expected)


def test_base_params_validation():
    with pytest.raises(ContractViolation):
        BaseParams(np.array([0.0, 0.5]))
    assert BaseParams.constant(3).beta.tolist() == [0.1] * 3


@pytest.mark.parametrize("o,expected", [(0.5, 0), (0.5000001, 1), (0.2, 0), (0.9, 1)])
def test_threshold_is_strict(o, expected):
    assert threshold(o) == expected


def test_deterministic_flow_nll():
    base = BaseParams.constant(3)
    x = np.array([1, 1, 0])
    u = np.array([[1, 1, 0]])
    assert deterministic_flow_nll(x, u, base) == pytest.approx(-3 * np.log(0.9))
