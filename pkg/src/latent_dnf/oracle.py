"""Ground truth by exhaustive enumeration of the latent space, central finite
differences, and Monte Carlo bias/variance benchmarking of the estimators."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import estimators as est
from .flow import BaseParams, base_log_prob
from .model import LatentFlow
from .rng import substream

DEFAULT_BUDGET_BITS = 22
CHUNK = 1 << 14


class EnumerationBudgetExceeded(RuntimeError):
    def __init__(self, bits, budget_bits):
        super().__init__(
            f"enumeration needs 2^{bits} = {2**bits} configurations, "
            f"budget is 2^{budget_bits}"
        )
        self.required = 2**bits


def all_bits(n):
    """Every vector in {0,1}^n as rows, in binary counting order."""
    idx = np.arange(2**n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.uint8)


@dataclass
class EnumerationReport:
    log_marginal: float
    elbo: float
    kl: float
    size: int
    q_mass: float
    wall_time: float
    grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def gap(self):
        return self.log_marginal - self.elbo


def _chunks(model: LatentFlow, x, budget_bits):
    bits = model.L * model.D
    if bits > budget_bits:
        raise EnumerationBudgetExceeded(bits, budget_bits)
    x = np.asarray(x, dtype=float).reshape(1, model.D)
    total = 2**bits
    for start in range(0, total, CHUNK):
        idx = np.arange(start, min(start + CHUNK, total), dtype=np.int64)
        u = ((idx[:, None] >> np.arange(bits - 1, -1, -1)) & 1).astype(float)
        u = u.reshape(len(idx), model.L, model.D)
        path = model.evaluate_path(np.repeat(x, len(idx), axis=0), u)
        yield path


def _terms(model, path):
    lpy = base_log_prob(path.y, model.base)[1]
    logp = path.log_p.sum(axis=(1, 2))
    logq = None if model.special_case else path.log_q.sum(axis=(1, 2))
    return lpy, logp, logq


def enumerate_marginal(model: LatentFlow, x, budget_bits=DEFAULT_BUDGET_BITS):
    """Exact log p_X(x) by log-sum-exp over every (u^(1), .., u^(L))."""
    parts = [logsumexp(lpy + logp) for lpy, logp, _ in
             (_terms(model, p) for p in _chunks(model, x, budget_bits))]
    return float(logsumexp(parts))


def enumerate_marginals(model: LatentFlow, budget_bits=DEFAULT_BUDGET_BITS):
    """log p_X(x) for every x in {0,1}^D (rows of :func:`all_bits`)."""
    return np.array([enumerate_marginal(model, x, budget_bits) for x in all_bits(model.D)])


def exhaustive_argmax(model: LatentFlow, x, source=None, budget_bits=DEFAULT_BUDGET_BITS):
    """The (u^(1), .., u^(L)) of highest probability under q(u | x), or under
    p(u | x) for ``source="generative"``. Returns (u, log-probability)."""
    source = source or ("generative" if model.special_case else "posterior")
    best_u, best = None, -np.inf
    for path in _chunks(model, x, budget_bits):
        lp = (path.log_p if source == "generative" else path.log_q).sum(axis=(1, 2))
        i = int(np.argmax(lp))
        if lp[i] > best:
            best_u, best = path.u[i].copy(), float(lp[i])
    return best_u, best


def _accumulate(acc, name, grads):
    d = acc.setdefault(name, {})
    for k, g in grads.items():
        d[k] = d[k] + g if k in d else g.copy()


def _weighted_theta(model, path, w):
    out = {}
    for l, c in enumerate(model.made):
        ev = path.p_evals[l]
        out[f"theta{l + 1}"] = c.backward(ev, w[:, None] * c.score_cotangent(ev, path.u[:, l]))[0]
    return out


def _weighted_lambda(model, path, w):
    out = {}
    for l, c in enumerate(model.posterior):
        ev = path.q_evals[l]
        out[f"lambda{l + 1}"] = c.backward(ev, w[:, None] * c.score_cotangent(ev, path.u[:, l]))[0]
    return out


def _weighted_beta(model, path, w):
    y = path.y.astype(float)
    beta = model.base.beta
    return {"beta": (w[:, None] * (y / beta - (1 - y) / (1 - beta))).sum(axis=0)}


def enumerate_elbo(model: LatentFlow, x, budget_bits=DEFAULT_BUDGET_BITS, grads=False):
    """Exact ELBO, KL and log-marginal for one x.

    For a model without posterior the ELBO is the q := p bound E_p[log p_Y].
    With ``grads`` the report also carries exact gradients, obtained by
    differentiating the enumerated sums term by term:

    ``elbo``        every group, grad of the ELBO
    ``recon``       lambda groups, grad of E_q[log p_Y]
    ``kl``          lambda groups, grad of -KL(q || p)
    ``special``     theta and beta, grad of E_p[log p_Y]
    ``marginal``    theta and beta, grad of log p_X(x)
    """
    t0 = time.perf_counter()
    parts, elbo, kl, mass, size = [], 0.0, 0.0, 0.0, 0
    special_bound = 0.0
    g: dict[str, dict[str, np.ndarray]] = {}
    for path in _chunks(model, x, budget_bits):
        lpy, logp, logq = _terms(model, path)
        size += lpy.size
        parts.append(logsumexp(lpy + logp))
        wp = np.exp(logp)
        special_bound += float(np.sum(wp * lpy))
        if logq is not None:
            wq = np.exp(logq)
            mass += float(wq.sum())
            f = lpy + logp - logq
            elbo += float(np.sum(wq * f))
            kl += float(np.sum(wq * (logq - logp)))
        else:
            mass += float(wp.sum())
        if not grads:
            continue
        _accumulate(g, "special", _weighted_theta(model, path, wp * lpy))
        _accumulate(g, "special", _weighted_beta(model, path, wp))
        if logq is not None:
            _accumulate(g, "elbo", _weighted_theta(model, path, wq))
            _accumulate(g, "elbo", _weighted_beta(model, path, wq))
            _accumulate(g, "elbo", _weighted_lambda(model, path, wq * (f - 1.0)))
            _accumulate(g, "recon", _weighted_lambda(model, path, wq * lpy))
            _accumulate(g, "kl", _weighted_lambda(model, path, wq * (logp - logq - 1.0)))
    log_marginal = float(logsumexp(parts))
    if logq is None:
        elbo, kl = special_bound, 0.0
        if grads:
            g["elbo"] = dict(g["special"])
    if grads:
        for path in _chunks(model, x, budget_bits):
            lpy, logp, _ = _terms(model, path)
            post = np.exp(lpy + logp - log_marginal)
            _accumulate(g, "marginal", _weighted_theta(model, path, post))
            _accumulate(g, "marginal", _weighted_beta(model, path, post))
    return EnumerationReport(log_marginal, elbo, kl, size, mass,
                             time.perf_counter() - t0, g)


def enumerate_grads(model: LatentFlow, x, budget_bits=DEFAULT_BUDGET_BITS):
    return enumerate_elbo(model, x, budget_bits, grads=True).grads


# -- finite differences ------------------------------------------------------------


def finite_diff(fn, params, h=1e-5):
    """Central differences of a scalar ``fn`` at ``params``."""
    params = np.array(params, dtype=float)
    grad = np.empty_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += h
        f_plus = fn(p)
        p[i] -= 2 * h
        grad[i] = (f_plus - fn(p)) / (2 * h)
    return grad


def group_fn(model: LatentFlow, group, scalar_fn):
    """Wrap ``scalar_fn(model)`` as a function of one parameter group."""
    live = model.param_groups()[group]

    def fn(p):
        saved = live.copy()
        live[...] = p
        try:
            return scalar_fn(model)
        finally:
            live[...] = saved

    return fn


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# -- benchmark problems -------------------------------------------------------------


@dataclass
class Problem:
    model: LatentFlow
    x: np.ndarray
    seed: int


def randomize(model: LatentFlow, rng, scale=1.0):
    """Gaussian weights and biases, so probabilities are far from 1/2.

    Large scales make some configurations so rare that a finite Monte Carlo
    sample cannot resolve their contribution; 0.5 keeps every configuration
    above roughly 1e-5 for the small problems used in certification."""
    for name, p in model.param_groups().items():
        if name != "beta":
            p[...] = rng.normal(0.0, scale, size=p.shape)


def make_problem(seed, D=4, L=1, hidden=8, special=False, scale=0.5, beta=None,
                 mask_scheme="prefix"):
    rng = substream(seed, "problem")
    base = BaseParams(rng.uniform(0.1, 0.9, size=D) if beta is None else np.full(D, beta))
    model = LatentFlow(D, L, base, made_hidden=(hidden,),
                       posterior_hidden=None if special else (hidden,),
                       mask_scheme=mask_scheme)
    randomize(model, rng, scale)
    x = rng.integers(0, 2, size=D).astype(np.uint8)
    return Problem(model, x, seed)


@dataclass
class BiasVarianceReport:
    estimator: str
    n: int
    coords: list[str]
    mean: np.ndarray
    se: np.ndarray
    exact: np.ndarray
    var: np.ndarray

    @property
    def z(self):
        diff = self.mean - self.exact
        scale = np.maximum(np.abs(self.exact), 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.se > 0, diff / self.se, 0.0)
        # zero standard error: the estimator is deterministic for that coordinate
        stuck = (self.se == 0) & (np.abs(diff) > 1e-12 * scale)
        return np.where(stuck, np.copysign(np.inf, diff), z)

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z))) if self.z.size else 0.0

    @property
    def mean_var(self):
        return float(np.mean(self.var))

    def to_csv(self, fh=None, header=True):
        own = fh is None
        fh = fh or io.StringIO()
        w = csv.writer(fh)
        if header:
            w.writerow(CSV_HEADER)
        for i, c in enumerate(self.coords):
            w.writerow([self.estimator, c, repr(float(self.mean[i])), repr(float(self.se[i])),
                        repr(float(self.exact[i])), repr(float(self.z[i])), repr(float(self.var[i])), self.n])
        return fh.getvalue() if own else None


CSV_HEADER = ["estimator", "coord", "mean", "se", "exact", "z", "var", "n"]
TARGETS = ("beta", "theta", "recon", "kl", "lambda", "special", "elbo")


def _exact_for(target, grads):
    if target == "beta":
        return {"beta": grads["elbo"]["beta"]}
    if target == "theta":
        return {k: v for k, v in grads["elbo"].items() if k.startswith("theta")}
    if target in ("recon", "kl"):
        return grads[target]
    if target == "lambda":
        return {k: v for k, v in grads["elbo"].items() if k.startswith("lambda")}
    if target == "special":
        return {k: v for k, v in grads["special"].items() if k.startswith("theta")}
    if target == "elbo":
        return grads["elbo"]
    raise ValueError(f"unknown target {target!r}")


def _sample_grads(problem, cfg, target, uniforms, baselines):
    model = problem.model
    x = np.repeat(problem.x[None].astype(float), uniforms["main"].shape[0], axis=0)
    if target == "special":
        path = model.sample_prior(x, uniforms["main"])
    else:
        path = model.sample_posterior(x, uniforms["main"])
    critic = None
    if cfg.self_critic == "sample":
        sampler = model.sample_prior if target == "special" else model.sample_posterior
        critic = sampler(x, uniforms["critic"])
    elif cfg.self_critic == "greedy":
        critic = model.greedy(x)
    kw = dict(per_example=True, update=False)
    if target == "beta":
        return {"beta": est.grad_beta(model, path, per_example=True)}
    if target == "theta":
        return est.grad_theta(model, path, per_example=True)
    if target == "special":
        prefix = model.sample_prior(x, uniforms["prefix"]) if cfg.gamma_prefix > 0 else None
        return est.special_case_grad(model, path, baselines.recon, cfg, prefix, critic, **kw)
    out = {}
    if target in ("recon", "lambda", "elbo"):
        out.update(est.grad_lambda_reconstruction(model, path, baselines.recon, cfg, critic, **kw))
    if target in ("kl", "lambda", "elbo"):
        for k, v in est.grad_lambda_kl(model, path, baselines.kl, cfg, **kw).items():
            out[k] = out[k] + v if k in out else v
    if target == "elbo":
        out.update(est.grad_theta(model, path, per_example=True))
        out["beta"] = est.grad_beta(model, path, per_example=True)
    return out


def bench_estimator(cfg: est.EstimatorConfig, problem: Problem, n, target,
                    chunk=20000, baselines=None, exact=None, seed=0):
    """Run ``n`` independent single-sample estimates at ``problem.x`` and
    compare coordinate-wise with the enumerated gradient."""
    model = problem.model
    if exact is None:
        exact = _exact_for(target, enumerate_grads(model, problem.x))
    groups = list(exact)
    baselines = baselines or est.Baselines.for_model(model, cfg)
    count, mean, m2 = 0, None, None
    tag = f"bench/{target}/{cfg.kind}/{cfg.self_critic}"
    for k, start in enumerate(range(0, n, chunk)):
        b = min(chunk, n - start)
        rng = substream(seed, tag, problem.seed, k)
        shape = (b, model.L, model.D)
        uniforms = {"main": rng.random(shape), "critic": rng.random(shape),
                    "prefix": rng.random(shape)}
        g = _sample_grads(problem, cfg, target, uniforms, baselines)
        g = np.concatenate([g[name] for name in groups], axis=1)
        c_mean = g.mean(axis=0)
        c_m2 = ((g - c_mean) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = b, c_mean, c_m2
        else:
            tot = count + b
            delta = c_mean - mean
            mean = mean + delta * b / tot
            m2 = m2 + c_m2 + delta**2 * count * b / tot
            count = tot
    var = m2 / max(count - 1, 1)
    coords = [f"{name}[{i}]" for name in groups for i in range(exact[name].size)]
    ex = np.concatenate([exact[name] for name in groups])
    return BiasVarianceReport(f"{target}:{cfg.kind}:{cfg.self_critic}:{cfg.baseline}",
                              count, coords, mean, np.sqrt(var / count), ex, var)


def bench_ste(problem: Problem, xs, detach_inputs=False):
    """STE gradient versus the exact gradient of the q := p bound, averaged
    over the examples ``xs``; the standard error is across examples."""
    model = problem.model
    _, grads = est.ste_step(model, np.asarray(xs, dtype=float), per_example=True,
                            detach_inputs=detach_inputs)
    groups = [f"theta{l + 1}" for l in range(model.L)]
    ste = np.concatenate([grads[k] for k in groups], axis=1)
    exact = []
    for x in xs:
        g = enumerate_grads(model, x)["special"]
        exact.append(np.concatenate([g[k] for k in groups]))
    exact = np.array(exact)
    diff = ste - exact
    n = len(xs)
    coords = [f"{k}[{i}]" for k in groups for i in range(model.param_groups()[k].size)]
    var = diff.var(axis=0, ddof=1)
    return BiasVarianceReport("ste-bias", n, coords, diff.mean(axis=0),
                              np.sqrt(var / n), np.zeros(diff.shape[1]), var), ste, exact
