import itertools

import numpy as np
import pytest

from latent_dnf.conditioners import (COND_MODES, MadeConditioner, PosteriorConditioner,
                                     build_made_masks, made_ordering)
from latent_dnf.nn import ContractViolation, bernoulli_entropy


def connectivity(masks):
    reach = masks[0]
    for m in masks[1:]:
        reach = (m @ reach > 0).astype(int)
    return reach


@pytest.mark.parametrize("D,hidden", [(1, (4,)), (3, (5,)), (6, (8, 8)), (7, (3,))])
@pytest.mark.parametrize("cond", COND_MODES)
def test_mask_connectivity(D, hidden, cond):
    m = build_made_masks(D, hidden, cond)
    reach = connectivity(m.masks)
    rank = made_ordering(D)
    prev, curr = reach[:, :D], reach[:, D:]
    # own bits: strictly earlier positions only
    assert not np.any(curr & (rank[:, None] <= rank[None, :]))
    if cond == "strict":
        assert not np.any(prev & (rank[:, None] <= rank[None, :]))
    elif cond == "inclusive":
        assert not np.any(prev & (rank[:, None] < rank[None, :]))


def test_custom_order_is_respected():
    order = np.array([3, 1, 2])
    m = build_made_masks(3, (6,), "strict", order)
    reach = connectivity(m.masks)
    # position 1 has order 1 and may read nothing
    assert reach[1].sum() == 0


def made(D=4, layer=1, seed=0, hidden=(6,)):
    rng = np.random.default_rng(seed)
    c = MadeConditioner(D, hidden, layer=layer, rng=rng)
    c.params[...] = rng.normal(size=c.params.size)
    return c, rng


@pytest.mark.parametrize("layer", [1, 2])
def test_conditional_sums_to_one_over_outputs(layer):
    c, rng = made(layer=layer)
    prev = rng.integers(0, 2, 4).astype(float)
    total = sum(np.exp(c.log_prob(prev, np.array(u, float))[0])
                for u in itertools.product([0, 1], repeat=4))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_sample_log_prob_agrees_with_full_pass():
    c, rng = made(hidden=(5, 5))
    prev = rng.integers(0, 2, (8, 4)).astype(float)
    u, lp = c.sample(prev, rng.random((8, 4)))
    np.testing.assert_allclose(lp, c.log_prob(prev, u)[1])


def test_incremental_decoding_matches_generic_path():
    c, rng = made(hidden=(7,))
    prev = rng.integers(0, 2, (10, 4)).astype(float)
    unif = rng.random((10, 4))
    fast = c.sample_bits(prev, lambda d, p: unif[:, d] < p)
    slow = np.zeros((10, 4))
    for d in c.sequence:
        slow[:, d] = unif[:, d] < c.forward(prev, slow).probs[:, d]
    np.testing.assert_array_equal(fast, slow)


def test_sampling_frequencies_match_probabilities():
    c, rng = made(D=2)
    prev = np.zeros((200_000, 2))
    u, _ = c.sample(prev, rng.random((200_000, 2)))
    p = c.probs(np.zeros(2), np.zeros(2))
    n0 = (u[:, 0] == 1).mean()
    se = np.sqrt(p[0] * (1 - p[0]) / len(u))
    assert abs(n0 - p[0]) < 5 * se


def test_zero_network_bias_gradient_is_centred_bits():
    c = MadeConditioner(3, (4,))
    u = np.array([[1.0, 0.0, 1.0]])
    ev = c.forward(np.zeros((1, 3)), u)
    g, _, _ = c.backward(ev, c.score_cotangent(ev, u))
    out_bias = g[-3:]
    np.testing.assert_allclose(out_bias, [0.5, -0.5, 0.5])


def test_posterior_entropy_is_closed_form():
    rng = np.random.default_rng(2)
    q = PosteriorConditioner(3, (4,), rng=rng)
    prev = rng.integers(0, 2, (5, 3)).astype(float)
    p = q.probs(prev)
    np.testing.assert_allclose(q.entropy(prev), bernoulli_entropy(p).sum(axis=1))


def test_posterior_is_factorised():
    rng = np.random.default_rng(4)
    q = PosteriorConditioner(3, (4,), rng=rng)
    prev = np.array([1.0, 0.0, 1.0])
    p = q.probs(prev)
    u = np.array([1.0, 1.0, 0.0])
    assert q.log_prob(prev, u)[0] == pytest.approx(np.log(p[0] * p[1] * (1 - p[2])))


def test_wrong_length_raises():
    c, _ = made()
    with pytest.raises(ContractViolation):
        c.forward(np.zeros(3), np.zeros(3))
