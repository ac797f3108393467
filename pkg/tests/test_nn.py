import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_dnf.nn import (EPS_P, AdamState, ContractViolation, MaskedMLP, NonFiniteGradient,
                           adam_step, bernoulli_entropy, bernoulli_entropy_grad_logits,
                           bernoulli_log_prob, bernoulli_score_logits, sigmoid, sigmoid_grad)
from latent_dnf.oracle import finite_diff


def test_sigmoid_is_clamped():
    p = sigmoid(np.array([-100.0, 0.0, 100.0]))
    assert p[0] == EPS_P and p[2] == 1 - EPS_P
    assert p[1] == 0.5


def test_sigmoid_grad_vanishes_under_clamp():
    assert sigmoid_grad(np.array([50.0]))[0] == 0.0
    assert sigmoid_grad(np.array([0.0]))[0] == pytest.approx(0.25)


@pytest.mark.parametrize("p,bit,expected", [
    (0.5, 1, np.log(0.5)),
    (0.9, 1, np.log(0.9)),
    (0.9, 0, np.log(0.1)),
])
def test_bernoulli_log_prob_values(p, bit, expected):
    assert bernoulli_log_prob(p, bit) == pytest.approx(expected)


def test_bernoulli_log_prob_rejects_unclamped():
    with pytest.raises(ContractViolation):
        bernoulli_log_prob(0.0, 1)


# beyond |z| ~ 8 the difference quotient of log1p(-p) loses too many digits
@given(st.floats(-8, 8), st.integers(0, 1))
def test_score_matches_derivative_of_log_prob(z, bit):
    h = 1e-6
    num = (bernoulli_log_prob(sigmoid(z + h), bit) - bernoulli_log_prob(sigmoid(z - h), bit)) / (2 * h)
    assert bernoulli_score_logits(np.array(z), bit) == pytest.approx(num, abs=1e-5)


@pytest.mark.parametrize("z", [-20.0, 20.0])
@pytest.mark.parametrize("bit", [0, 1])
def test_score_vanishes_under_clamp(z, bit):
    assert bernoulli_score_logits(np.array(z), bit) == 0.0


@given(st.floats(-20, 20))
def test_score_has_zero_mean(z):
    s = sigmoid(z)
    mean = s * bernoulli_score_logits(z, 1) + (1 - s) * bernoulli_score_logits(z, 0)
    assert abs(mean) < 1e-12


def test_entropy_gradient_matches_finite_difference():
    z = np.linspace(-4, 4, 9)
    num = (bernoulli_entropy(sigmoid(z + 1e-6)) - bernoulli_entropy(sigmoid(z - 1e-6))) / 2e-6
    np.testing.assert_allclose(bernoulli_entropy_grad_logits(z), num, atol=1e-7)


@pytest.mark.parametrize("activation", ["relu", "tanh", "sigmoid"])
@pytest.mark.parametrize("sizes", [(3, 4, 2), (5, 6, 6, 3)])
def test_mlp_backward_matches_finite_differences(activation, sizes):
    rng = np.random.default_rng(1)
    net = MaskedMLP(sizes, activation=activation, rng=rng)
    net.params[...] = rng.normal(size=net.n_params)
    x = rng.normal(size=(4, sizes[0]))
    cot = rng.normal(size=(4, sizes[-1]))
    _, tape = net.forward(x)
    g, gx = net.backward(tape, cot)

    def loss(p):
        saved = net.params.copy()
        net.params[...] = p
        out = float((net.forward(x)[0] * cot).sum())
        net.params[...] = saved
        return out

    np.testing.assert_allclose(g, finite_diff(loss, net.params), rtol=1e-5, atol=1e-7)
    gx_num = finite_diff(lambda v: float((net.forward(v.reshape(x.shape))[0] * cot).sum()),
                         x.ravel()).reshape(x.shape)
    np.testing.assert_allclose(gx, gx_num, rtol=1e-5, atol=1e-7)


def test_masked_weights_get_no_gradient_and_no_influence():
    rng = np.random.default_rng(0)
    masks = [np.array([[1, 0], [0, 1], [1, 1]]), np.array([[1, 0, 0]])]
    net = MaskedMLP((2, 3, 1), masks, rng=rng)
    x = rng.normal(size=(5, 2))
    _, tape = net.forward(x)
    g, _ = net.backward(tape, np.ones((5, 1)))
    w1 = g[:6].reshape(3, 2)
    assert w1[0, 1] == 0 and w1[1, 0] == 0
    # output only sees hidden unit 0, which only sees input 0
    before = net.forward(x)[0]
    x2 = x.copy()
    x2[:, 1] += 10
    np.testing.assert_array_equal(before, net.forward(x2)[0])


def test_per_example_gradients_sum_to_batch_gradient():
    rng = np.random.default_rng(3)
    net = MaskedMLP((3, 5, 2), rng=rng)
    x = rng.normal(size=(6, 3))
    cot = rng.normal(size=(6, 2))
    _, tape = net.forward(x)
    g, _ = net.backward(tape, cot)
    gp, _ = net.backward(tape, cot, per_example=True)
    assert gp.shape == (6, net.n_params)
    np.testing.assert_allclose(gp.sum(axis=0), g)


def test_layer_views_share_flat_parameters():
    net = MaskedMLP((2, 3, 1))
    net.params[:] = np.arange(net.n_params)
    assert net.layers[0].weights[0, 0] == 0
    assert net.layers[1].bias[0] == net.n_params - 1


def test_shape_mismatches_raise():
    with pytest.raises(ContractViolation):
        MaskedMLP((2, 3, 1), masks=[np.ones((3, 3)), np.ones((1, 3))])
    net = MaskedMLP((2, 3, 1))
    with pytest.raises(ContractViolation):
        net.forward(np.zeros((1, 4)))


def test_adam_first_step_moves_by_learning_rate():
    p = np.array([1.0, -2.0, 0.5])
    state = AdamState.zeros(3, lr=0.01)
    new, state = adam_step(p, np.array([3.0, -0.2, 0.0]), state)
    np.testing.assert_allclose(new, p - 0.01 * np.array([1, -1, 0]), atol=1e-8)
    assert state.step == 1


def test_adam_minimises_quadratic():
    p = np.array([3.0, -4.0])
    state = AdamState.zeros(2, lr=0.1)
    for _ in range(500):
        p, state = adam_step(p, 2 * p, state)
    assert np.abs(p).max() < 1e-2


def test_adam_refuses_non_finite_gradient():
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2), "theta1")
    assert info.value.group == "theta1"


@settings(max_examples=25)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_adam_is_deterministic(values):
    g = np.array(values)
    a = adam_step(np.zeros_like(g), g, AdamState.zeros(g.size))[0]
    b = adam_step(np.zeros_like(g), g, AdamState.zeros(g.size))[0]
    assert a.tobytes() == b.tobytes()
