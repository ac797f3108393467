"""Estimator tests. Unbiasedness is checked exactly here: the per-example
estimate is averaged over every latent configuration weighted by its sampling
probability (pairs of configurations when a second sample is involved), and
compared with the enumerated gradient."""

import numpy as np
import pytest

from latent_dnf import estimators as est
from latent_dnf.nn import ContractViolation
from latent_dnf.oracle import all_bits, enumerate_grads, make_problem


def enumerated_paths(model, x, sampler="q"):
    n = model.L * model.D
    u = all_bits(n).reshape(-1, model.L, model.D).astype(float)
    xs = np.repeat(np.asarray(x, float)[None], len(u), 0)
    path = model.evaluate_path(xs, u)
    logw = (path.log_q if sampler == "q" else path.log_p).sum(axis=(1, 2))
    return path, np.exp(logw)


def take(path, idx, model, x):
    return model.evaluate_path(np.repeat(np.asarray(x, float)[None], len(idx), 0), path.u[idx])


def exact_mean(grads, w):
    return {k: (w[:, None] * g).sum(axis=0) for k, g in grads.items()}


def assert_close(a, b, tol=1e-10):
    for k in b:
        np.testing.assert_allclose(a[k], b[k], atol=tol, rtol=0)


@pytest.mark.parametrize("L,credit", [(1, "per_dim"), (1, "strict"), (2, "strict")])
def test_reconstruction_sfe_is_unbiased(L, credit):
    p = make_problem(1, D=3, L=L)
    cfg = est.EstimatorConfig(credit=credit)
    path, w = enumerated_paths(p.model, p.x)
    base = est.Baselines.for_model(p.model, cfg)
    g = est.grad_lambda_reconstruction(p.model, path, base.recon, cfg, per_example=True,
                                       update=False)
    assert_close(exact_mean(g, w), enumerate_grads(p.model, p.x)["recon"])


def test_per_dim_credit_is_biased_beyond_one_layer():
    p = make_problem(1, D=3, L=2, scale=1.5)
    cfg = est.EstimatorConfig(credit="per_dim")
    path, w = enumerated_paths(p.model, p.x)
    base = est.Baselines.for_model(p.model, cfg)
    g = est.grad_lambda_reconstruction(p.model, path, base.recon, cfg, per_example=True,
                                       update=False)
    exact = enumerate_grads(p.model, p.x)["recon"]
    diff = max(np.abs(exact_mean(g, w)[k] - exact[k]).max() for k in exact)
    assert diff > 1e-6


@pytest.mark.parametrize("L,credit", [(1, "per_dim"), (2, "per_dim"), (2, "strict"),
                                      (3, "strict")])
@pytest.mark.parametrize("factoring", [True, False])
def test_kl_sfe_is_unbiased(L, credit, factoring):
    p = make_problem(2, D=3 if L < 3 else 2, L=L)
    cfg = est.EstimatorConfig(credit=credit, entropy_factoring=factoring)
    path, w = enumerated_paths(p.model, p.x)
    base = est.Baselines.for_model(p.model, cfg)
    g = est.grad_lambda_kl(p.model, path, base.kl, cfg, per_example=True, update=False)
    assert_close(exact_mean(g, w), enumerate_grads(p.model, p.x)["kl"])


def test_theta_and_beta_pathwise_gradients_are_unbiased():
    p = make_problem(3, D=3, L=2)
    path, w = enumerated_paths(p.model, p.x)
    g = est.grad_theta(p.model, path, per_example=True)
    g["beta"] = est.grad_beta(p.model, path, per_example=True)
    exact = enumerate_grads(p.model, p.x)["elbo"]
    assert_close(exact_mean(g, w), {k: exact[k] for k in g})


def _pairs(model, x, sampler):
    path, w = enumerated_paths(model, x, sampler)
    n = len(w)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    return take(path, i, model, x), take(path, j, model, x), w[i] * w[j]


@pytest.mark.parametrize("L", [1, 2])
def test_self_critic_keeps_reconstruction_unbiased(L):
    p = make_problem(4, D=2, L=L)
    cfg = est.EstimatorConfig(self_critic="sample", credit="strict")
    main, critic, w = _pairs(p.model, p.x, "q")
    base = est.Baselines.for_model(p.model, cfg)
    g = est.grad_lambda_reconstruction(p.model, main, base.recon, cfg, critic,
                                       per_example=True, update=False)
    assert_close(exact_mean(g, w), enumerate_grads(p.model, p.x)["recon"])


@pytest.mark.parametrize("L", [1, 2])
def test_special_case_with_prefix_term_is_unbiased(L):
    p = make_problem(5, D=3 if L == 1 else 2, L=L, special=True)
    cfg = est.EstimatorConfig(kind="sfe-special", gamma_prefix=1.0)
    main, prefix, w = _pairs(p.model, p.x, "p")
    base = est.Baselines.for_model(p.model, cfg)
    g = est.special_case_grad(p.model, main, base.recon, cfg, prefix, per_example=True,
                              update=False)
    exact = enumerate_grads(p.model, p.x)["special"]
    assert_close(exact_mean(g, w), {k: v for k, v in exact.items() if k.startswith("theta")})


def test_impatient_special_case_is_biased():
    p = make_problem(5, D=3, L=1, special=True, scale=1.5)
    cfg = est.EstimatorConfig(kind="sfe-special", gamma_prefix=0.0)
    path, w = enumerated_paths(p.model, p.x, "p")
    base = est.Baselines.for_model(p.model, cfg)
    g = est.special_case_grad(p.model, path, base.recon, cfg, per_example=True, update=False)
    exact = enumerate_grads(p.model, p.x)["special"]["theta1"]
    assert np.abs(exact_mean(g, w)["theta1"] - exact).max() > 1e-6


def test_special_case_elbo_is_base_log_likelihood():
    p = make_problem(0, D=3, L=1, special=True)
    u = np.random.default_rng(0).random((5, 1, 3))
    path = p.model.sample_prior(np.repeat(p.x[None], 5, 0).astype(float), u)
    np.testing.assert_allclose(est.elbo_sample(p.model, path),
                               est.base_log_prob(path.y, p.model.base)[1])


def test_elbo_estimate_converges_to_exact():
    from latent_dnf.oracle import enumerate_elbo

    p = make_problem(0, D=4, L=1)
    K = 100_000
    u = np.random.default_rng(1).random((1, K, 1, 4))
    mc = est.elbo_estimate(p.model, p.x[None], u)[0]
    path = p.model.sample_posterior(np.repeat(p.x[None], K, 0).astype(float), u[0])
    se = est.elbo_sample(p.model, path).std() / np.sqrt(K)
    assert abs(mc - enumerate_elbo(p.model, p.x).elbo) < 3 * se


@pytest.mark.parametrize("y,expected", [(1, 1 / 0.3), (0, -1 / 0.7)])
def test_grad_beta_values(y, expected):
    p = make_problem(0, D=1, L=1, beta=0.3)
    u = np.array([[[0.0]]])
    path = p.model.evaluate_path(np.array([[float(y)]]), u)
    assert est.grad_beta(p.model, path)[0] == pytest.approx(expected)


def test_ste_gradient_is_finite_and_biased():
    p = make_problem(0, D=4, L=2, special=True, scale=1.0)
    xs = all_bits(4).astype(float)[3:9]
    loss, g = est.ste_step(p.model, xs)
    assert np.all(np.isfinite(loss))
    assert all(np.all(np.isfinite(v)) for v in g.values())
    exact = sum(enumerate_grads(p.model, x)["special"]["theta1"] for x in xs)
    assert np.abs(g["theta1"] - exact).max() > 1e-6


def test_ste_detached_differs_from_full():
    p = make_problem(1, D=4, L=2, special=True, scale=1.0)
    # summing over all of {0,1}^D uniformly would cancel every gradient
    rng = np.random.default_rng(0)
    xs = p.model.sample_data(rng.random((64, 2, 4)), rng.random((64, 4)))[0].astype(float)
    _, full = est.ste_step(p.model, xs)
    _, det = est.ste_step(p.model, xs, detach_inputs=True)
    assert not np.allclose(full["theta1"], det["theta1"])


def test_baseline_state_update():
    b = est.BaselineState.fresh(2, decay=0.5, floor=1.0)
    b.update(np.array([[2.0, 4.0], [4.0, 8.0]]))
    np.testing.assert_allclose(b.mean, [1.5, 3.0])
    np.testing.assert_allclose(b.var, [2.125, 7.0])


def test_standardize_modes():
    b = est.BaselineState(np.array([1.0]), np.array([16.0]), 0.9, 1.0)
    s = np.array([[5.0]])
    assert est.standardize(s, b, "none", update=False)[0][0, 0] == 5.0
    assert est.standardize(s, b, "mean", update=False)[0][0, 0] == 4.0
    assert est.standardize(s, b, "standardize", update=False)[0][0, 0] == 1.0
    with pytest.raises(ContractViolation):
        est.standardize(s, b, "bogus")


def test_variance_floor_applies():
    b = est.BaselineState(np.zeros(1), np.array([1e-6]), 0.9, 1.0)
    assert b.std[0] == 1.0


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(self_critic="x"), dict(baseline="x"),
                                dict(gamma_prefix=-1), dict(gamma_kl=np.inf), dict(samples=0),
                                dict(credit="x")])
def test_config_validation(kw):
    with pytest.raises(ContractViolation):
        est.EstimatorConfig(**kw)


def test_prefix_term_requires_second_sample():
    p = make_problem(0, D=3, L=1, special=True)
    cfg = est.EstimatorConfig(kind="sfe-special", gamma_prefix=1.0)
    path, _ = enumerated_paths(p.model, p.x, "p")
    with pytest.raises(ContractViolation):
        est.special_case_grad(p.model, path, est.BaselineState.fresh(3), cfg)


def test_estimate_gradients_groups():
    p = make_problem(0, D=3, L=2)
    cfg = est.EstimatorConfig(self_critic="greedy", baseline="standardize")
    base = est.Baselines.for_model(p.model, cfg)
    u = {"main": np.random.default_rng(0).random((4, 2, 3))}
    obj, acc = est.estimate_gradients(p.model, np.repeat(p.x[None], 4, 0), cfg, base, u)
    assert obj.shape == (4,)
    assert sorted(acc.grads) == ["lambda1", "lambda2", "theta1", "theta2"]
    assert acc.check_finite() is None


def test_baselines_move_only_when_updating():
    p = make_problem(0, D=3, L=1)
    cfg = est.EstimatorConfig(baseline="mean")
    base = est.Baselines.for_model(p.model, cfg)
    u = {"main": np.random.default_rng(0).random((4, 1, 3))}
    x = np.repeat(p.x[None], 4, 0)
    est.estimate_gradients(p.model, x, cfg, base, u, update=False)
    assert np.all(base.recon.mean == 0)
    est.estimate_gradients(p.model, x, cfg, base, u)
    assert np.any(base.recon.mean != 0)


def test_next_layer_only_kl_credit_is_biased_at_depth_three():
    p = make_problem(2, D=2, L=3, scale=1.5)
    cfg = est.EstimatorConfig(credit="per_dim")
    path, w = enumerated_paths(p.model, p.x)
    base = est.Baselines.for_model(p.model, cfg)
    g = est.grad_lambda_kl(p.model, path, base.kl, cfg, per_example=True, update=False)
    exact = enumerate_grads(p.model, p.x)["kl"]
    assert np.abs(exact_mean(g, w)["lambda1"] - exact["lambda1"]).max() > 1e-8
