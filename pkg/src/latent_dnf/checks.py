"""Acceptance suites shared by ``latent-dnf check`` and the test-suite.

Each suite returns a :class:`CheckResult`; quantities that are reported rather
than gated (variance ratios, STE bias) are written as CSV when an output
directory is given.
"""

from __future__ import annotations

import csv
import io
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import estimators as est
from .config import RunConfig
from .data import GrayImageSet, parse_idx, serialize_idx
from .flow import BaseParams
from .model import LatentFlow
from .oracle import (all_bits, bench_estimator, bench_ste, enumerate_elbo,
                     enumerate_marginal, enumerate_marginals, exhaustive_argmax, finite_diff,
                     group_fn, make_problem, randomize)
from .rng import substream
from .train import TrainState, evaluate, is_nll, load_data, train_step

GRAD_TOL = 1e-4
NORM_TOL = 1e-9
BOUND_SLACK = -1e-12
Z_LIMIT = 5.0
IS_TOL = 0.01


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    artifacts: dict = field(default_factory=dict)

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def run(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def vector_error(analytic, numeric):
    """Largest coordinate error relative to the gradient's overall scale."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


# -- gradient correctness -------------------------------------------------------------


def _grad_case(kind, rng):
    """One (analytic, finite-difference) pair for a random small instance."""
    D = int(rng.integers(2, 6))
    L = int(rng.integers(1, 3))
    act = ["relu", "tanh", "sigmoid"][int(rng.integers(3))]
    hidden = (int(rng.integers(3, 9)),)
    model = LatentFlow(D, L, BaseParams(rng.uniform(0.1, 0.9, D)), made_hidden=hidden,
                       posterior_hidden=hidden, activation=act, rng=rng)
    randomize(model, rng, 0.7)
    B = 3
    x = rng.integers(0, 2, (B, D)).astype(float)
    u = rng.integers(0, 2, (B, L, D)).astype(float)
    l = int(rng.integers(L))
    prev = x if l == 0 else u[:, l - 1]
    w = rng.normal(size=B)  # random weights make the batch reduction visible

    if kind == "made-params":
        c = model.made[l]
        ev = c.forward(prev, u[:, l])
        g = c.backward(ev, w[:, None] * c.score_cotangent(ev, u[:, l]))[0]
        fn = group_fn(model, f"theta{l + 1}", lambda m: w @ m.made[l].log_prob(prev, u[:, l])[0])
        return g, finite_diff(fn, c.params)
    if kind == "made-inputs":
        c = model.made[l]
        ev = c.forward(prev, u[:, l])
        cot = rng.normal(size=(B, D))
        _, g_prev, g_curr = c.backward(ev, cot)
        p0 = prev.copy()

        def fn(flat):
            z = c.forward(flat.reshape(B, D), u[:, l]).logits
            return float((cot * z).sum())

        def fn_curr(flat):
            return float((cot * c.forward(prev, flat.reshape(B, D)).logits).sum())

        return (np.concatenate([g_prev.ravel(), g_curr.ravel()]),
                np.concatenate([finite_diff(fn, p0.ravel()),
                                finite_diff(fn_curr, u[:, l].ravel())]))
    if kind == "posterior-params":
        c = model.posterior[l]
        ev = c.forward(prev)
        g = c.backward(ev, w[:, None] * c.score_cotangent(ev, u[:, l]))[0]
        fn = group_fn(model, f"lambda{l + 1}", lambda m: w @ m.posterior[l].log_prob(prev, u[:, l])[0])
        return g, finite_diff(fn, c.params)
    if kind == "posterior-entropy":
        c = model.posterior[l]
        ev = c.forward(prev)
        g = c.backward(ev, w[:, None] * c.entropy_cotangent(ev))[0]
        fn = group_fn(model, f"lambda{l + 1}", lambda m: w @ m.posterior[l].entropy(prev))
        return g, finite_diff(fn, c.params)
    if kind == "base":
        path = model.evaluate_path(x, u)
        g = (w[:, None] * est.grad_beta(model, path, per_example=True)).sum(axis=0)

        def fn(beta):
            saved = model.base.beta.copy()
            model.base.beta[...] = beta
            try:
                return w @ est.base_log_prob(path.y, model.base)[1]
            finally:
                model.base.beta[...] = saved

        return g, finite_diff(fn, model.base.beta)
    if kind == "path-theta":
        path = model.evaluate_path(x, u)
        g = est.grad_theta(model, path, per_example=True)
        g = np.concatenate([(w[:, None] * g[f"theta{k + 1}"]).sum(axis=0) for k in range(L)])

        def total(m):
            return w @ m.evaluate_path(x, u).log_p.sum(axis=(1, 2))

        fd = np.concatenate([finite_diff(group_fn(model, f"theta{k + 1}", total),
                                         model.made[k].params) for k in range(L)])
        return g, fd
    if kind == "enumerated-elbo":
        small = make_problem(int(rng.integers(1 << 30)), D=3, L=L, hidden=4)
        m, x1 = small.model, small.x
        grads = enumerate_elbo(m, x1, grads=True).grads["elbo"]
        name = list(grads)[int(rng.integers(len(grads)))]
        fn = group_fn(m, name, lambda mm: enumerate_elbo(mm, x1).elbo)
        return grads[name], finite_diff(fn, m.param_groups()[name])
    raise ValueError(kind)


GRAD_KINDS = ("made-params", "made-inputs", "posterior-params", "posterior-entropy",
              "base", "path-theta", "enumerated-elbo")


@_timed
def check_gradients(n_cases=200, seed=0, tol=GRAD_TOL):
    """Analytic gradients against central differences on random instances."""
    rng = substream(seed, "check/gradients")
    worst, worst_kind, failures = 0.0, "", 0
    for i in range(n_cases):
        kind = GRAD_KINDS[i % len(GRAD_KINDS)]
        g, fd = _grad_case(kind, rng)
        err = vector_error(g, fd)
        if err > worst:
            worst, worst_kind = err, kind
        failures += err >= tol
    return CheckResult("gradient correctness", failures == 0,
                       f"{n_cases} cases, worst relative error {worst:.2e} ({worst_kind}), "
                       f"{failures} above {tol:g}")


# -- normalisation ------------------------------------------------------------------------


def mask_violations(model: LatentFlow):
    """Connections that break the autoregressive structure, one entry per layer.

    Output d of layer 1 may read x only strictly before d; layers >= 2 may read
    u^(l-1) up to and including d; every layer may read its own u strictly
    before d.
    """
    out = []
    rank = np.asarray(model.order)
    for l, c in enumerate(model.made):
        reach = None
        for layer in c.net.layers:
            m = (layer.mask != 0).astype(int) if layer.mask is not None else np.ones(layer.weights.shape, int)
            reach = m if reach is None else (m @ reach > 0).astype(int)
        D = model.D
        prev_ok = rank[:, None] > rank[None, :] if l == 0 else rank[:, None] >= rank[None, :]
        curr_ok = rank[:, None] > rank[None, :]
        bad_prev = reach[:, :D].astype(bool) & ~prev_ok
        bad_curr = reach[:, D:].astype(bool) & ~curr_ok
        if bad_prev.any() or bad_curr.any():
            out.append(f"layer {l + 1}: {int(bad_prev.sum())} illegal conditioning "
                       f"connections, {int(bad_curr.sum())} illegal autoregressive connections")
    return out


def total_mass(model: LatentFlow):
    return float(np.exp(enumerate_marginals(model)).sum())


@_timed
def check_normalisation(n_models=20, seed=0, tol=NORM_TOL):
    """Sum over every x of p_X(x) by double enumeration, plus a negative control
    with unmasked conditioners that must fail."""
    rng = substream(seed, "check/normalisation")
    worst, flagged = 0.0, []
    for i in range(n_models):
        D, L = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        model = LatentFlow(D, L, BaseParams(rng.uniform(0.05, 0.95, D)), made_hidden=(6,),
                           posterior_hidden=None, rng=rng)
        randomize(model, rng, 1.5)
        worst = max(worst, abs(total_mass(model) - 1.0))
        flagged += mask_violations(model)
    ok = worst < tol and not flagged
    # negative control: conditioners that see the whole input
    control = LatentFlow(4, 2, BaseParams(np.full(4, 0.3)), made_hidden=(6,),
                         posterior_hidden=None, mask_scheme="unmasked",
                         rng=substream(seed, "check/normalisation/control"))
    randomize(control, substream(seed, "check/normalisation/control-params"), 1.5)
    control_err = abs(total_mass(control) - 1.0)
    control_flags = mask_violations(control)
    control_fails = control_err > tol and bool(control_flags)
    detail = (f"{n_models} models, max |sum - 1| = {worst:.1e}; unmasked control "
              f"|sum - 1| = {control_err:.3f} ({control_flags[0] if control_flags else 'not flagged'})")
    if flagged:
        detail += "; " + "; ".join(flagged)
    return CheckResult("normalisation", ok and control_fails, detail)


# -- bound validity -----------------------------------------------------------------------


@_timed
def check_bound(n_pairs=100, seed=0, slack=BOUND_SLACK):
    """Exact ELBO never exceeds the exact log-marginal."""
    rng = substream(seed, "check/bound")
    worst = np.inf
    for i in range(n_pairs):
        D, L = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        p = make_problem(int(rng.integers(1 << 30)), D=D, L=L, hidden=6,
                         special=bool(i % 4 == 3), scale=1.0)
        rep = enumerate_elbo(p.model, p.x)
        worst = min(worst, rep.gap)
    return CheckResult("bound validity", worst >= slack,
                       f"{n_pairs} pairs, smallest gap log p - ELBO = {worst:.2e}")


# -- estimator unbiasedness ---------------------------------------------------------------


def unbiasedness_cases():
    """(label, target, EstimatorConfig, special) for every certified estimator."""
    cases = []
    for L in (1, 2):
        credit = "per_dim" if L == 1 else "strict"
        cases += [
            (L, "beta", "beta", est.EstimatorConfig(), False),
            (L, "theta", "theta", est.EstimatorConfig(), False),
            (L, f"recon/{credit}", "recon", est.EstimatorConfig(credit=credit), False),
            (L, f"recon/{credit}/critic", "recon",
             est.EstimatorConfig(credit=credit, self_critic="sample"), False),
            (L, f"kl/{credit}", "kl", est.EstimatorConfig(credit=credit), False),
            (L, "special/prefix", "special",
             est.EstimatorConfig(kind="sfe-special", gamma_prefix=1.0), True),
        ]
    return cases


@_timed
def check_unbiasedness(n=200_000, seeds=(0,), D=4, out_dir=None, limit=Z_LIMIT):
    """Mean of n single-sample estimates against the enumerated gradient."""
    rows, worst, failures = [], 0.0, []
    buf = io.StringIO()
    first = True
    for seed in seeds:
        for L, label, target, cfg, special in unbiasedness_cases():
            prob = make_problem(seed, D=D, L=L, special=special, beta=None)
            rep = bench_estimator(cfg, prob, n, target, seed=seed)
            rep.estimator = f"L{L}:{label}:seed{seed}"
            rep.to_csv(buf, header=first)
            first = False
            z = rep.max_abs_z
            rows.append((rep.estimator, z))
            worst = max(worst, z)
            if not z < limit:
                failures.append(f"{rep.estimator} |z|={z:.2f}")
    if out_dir:
        Path(out_dir, "unbiasedness.csv").write_text(buf.getvalue())
    detail = f"{len(rows)} estimators, max |z| = {worst:.2f} at N={n}"
    if failures:
        detail += "; " + ", ".join(failures)
    return CheckResult("estimator unbiasedness", not failures, detail,
                       artifacts={"csv": buf.getvalue()})


# -- variance reduction -------------------------------------------------------------------


@_timed
def check_variance(n=200_000, seeds=(0, 1, 2), D=6, out_dir=None):
    """Self-critic against vanilla reconstruction SFE: mean coordinate variance."""
    lines = [["seed", "vanilla_var", "critic_var", "ratio"]]
    ok = True
    ratios = []
    for seed in seeds:
        prob = make_problem(seed, D=D, L=1)
        exact = None
        vanilla = bench_estimator(est.EstimatorConfig(), prob, n, "recon", seed=seed)
        critic = bench_estimator(est.EstimatorConfig(self_critic="sample"), prob, n, "recon",
                                 seed=seed, exact=exact)
        ratio = critic.mean_var / vanilla.mean_var
        ratios.append(ratio)
        ok &= critic.mean_var < vanilla.mean_var
        lines.append([seed, repr(float(vanilla.mean_var)), repr(float(critic.mean_var)), repr(float(ratio))])
    text = _csv_text(lines)
    if out_dir:
        Path(out_dir, "variance.csv").write_text(text)
    return CheckResult("variance reduction", ok,
                       "critic/vanilla variance ratio per seed: "
                       + ", ".join(f"{r:.3f}" for r in ratios),
                       artifacts={"csv": text})


def _csv_text(rows):
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    return buf.getvalue()


# -- straight-through characterisation ----------------------------------------------------


@_timed
def check_ste(seed=0, D=4, n_inputs=256, out_dir=None):
    """STE gradient minus the exact q := p bound gradient.

    Inputs are drawn from the model itself; averaging over all of {0,1}^D
    uniformly would make both gradients vanish identically.
    """
    lines = [["L", "coord", "bias", "se", "ci_low", "ci_high", "mean_ste", "mean_exact", "n"]]
    finite, parts = True, []
    for L in (1, 2):
        prob = make_problem(seed, D=D, L=L, special=True, scale=1.0)
        r = substream(seed, "check/ste/inputs", L)
        xs, _ = prob.model.sample_data(r.random((n_inputs, L, D)), r.random((n_inputs, D)))
        rep, ste, exact = bench_ste(prob, xs)
        lo = rep.mean - 1.96 * rep.se
        hi = rep.mean + 1.96 * rep.se
        for i, c in enumerate(rep.coords):
            lines.append([L, c, repr(float(rep.mean[i])), repr(float(rep.se[i])), repr(float(lo[i])), repr(float(hi[i])),
                          repr(float(ste[:, i].mean())), repr(float(exact[:, i].mean())), rep.n])
        finite &= bool(np.all(np.isfinite(rep.mean)) and np.all(np.isfinite(rep.se)))
        norm = float(np.linalg.norm(rep.mean))
        a, b = ste.mean(axis=0), exact.mean(axis=0)
        cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        excluded = int(np.sum((lo > 0) | (hi < 0)))
        finite &= norm > 0
        parts.append(f"L={L}: bias norm {norm:.4f} vs gradient norm {np.linalg.norm(b):.4f}, "
                     f"cosine {cos:.3f}, {excluded}/{len(rep.coords)} intervals exclude 0")
    text = _csv_text(lines)
    if out_dir:
        Path(out_dir, "ste_bias.csv").write_text(text)
    return CheckResult("STE characterisation", finite, "; ".join(parts),
                       artifacts={"csv": text})


# -- greedy flow against the exhaustive argmax (reported only) ---------------------------


@_timed
def check_greedy(seed=0, n_models=200, D=2, L=2, out_dir=None):
    """How often the layer-wise thresholded path differs from the global argmax
    of q(u | x). At L = 1 the two coincide; deeper stacks may disagree."""
    lines = [["model", "x", "greedy_u", "argmax_u", "greedy_log_q", "argmax_log_q"]]
    rng = substream(seed, "check/greedy")
    mismatches = total = 0
    shallow_ok = True
    for i in range(n_models):
        for depth in (1, L):
            p = make_problem(int(rng.integers(1 << 30)), D=D, L=depth, scale=2.0)
            xs = all_bits(D).astype(float)
            path = p.model.greedy(xs)
            for x, u, lq in zip(xs, path.u, path.log_q.sum(axis=(1, 2))):
                best_u, best = exhaustive_argmax(p.model, x)
                differs = not np.array_equal(u, best_u)
                if depth == 1:
                    shallow_ok &= not differs
                    continue
                total += 1
                if differs:
                    mismatches += 1
                    lines.append([i, "".join(str(int(b)) for b in x),
                                  "".join(str(int(b)) for b in u.ravel()),
                                  "".join(str(int(b)) for b in best_u.ravel()),
                                  repr(float(lq)), repr(best)])
    text = _csv_text(lines)
    if out_dir:
        Path(out_dir, "greedy_argmax.csv").write_text(text)
    return CheckResult("greedy vs argmax", shallow_ok,
                       f"L=1 greedy equals the argmax {'everywhere' if shallow_ok else 'NOT everywhere'}; "
                       f"L={L}, D={D}: {mismatches}/{total} inputs differ (reported only)",
                       artifacts={"csv": text})


# -- desk-scale learning -----------------------------------------------------------------


def desk_config(**overrides):
    values = dict(estimator="sfe-special", baseline="mean", gamma_prefix=0.0, L=1,
                  made_hidden="64", epochs=50, batch_size=128, lr=1e-3,
                  data_source="synthetic", synthetic_D=16, synthetic_L=1,
                  synthetic_n=2000, synthetic_eval_n=500, eval_samples=1000,
                  out_dir="runs/desk")
    values.update(overrides)
    return RunConfig(**values)


@_timed
def check_learning(cfg: RunConfig | None = None, out_dir=None, min_gain=0.10, max_gap=2.0):
    """Special-case training on synthetic data improves the IS-1000 NLL.

    Run files go to ``out_dir/desk``, or to a temporary directory when no
    output directory is given.
    """
    cfg = cfg or desk_config()
    if out_dir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return _learning(cfg.replace(out_dir=tmp), min_gain, max_gap)
    return _learning(cfg.replace(out_dir=str(Path(out_dir) / "desk")), min_gain, max_gap)


def _learning(cfg, min_gain, max_gap):
    from .train import train

    data = load_data(cfg)
    init = TrainState.fresh(cfg, data.train.D)
    before = evaluate(init.model, data.test.bits, cfg.eval_samples, cfg.seed)
    state = train(cfg, data)
    after = evaluate(state.model, data.test.bits, cfg.eval_samples, cfg.seed)
    gain = 1.0 - after.mean_is_nll / before.mean_is_nll
    gap = abs(after.mean_greedy_nll - after.mean_is_nll)
    ok = gain >= min_gain and gap <= max_gap
    return CheckResult("desk-scale learning", ok,
                       f"IS-{cfg.eval_samples} NLL {before.mean_is_nll:.3f} -> "
                       f"{after.mean_is_nll:.3f} ({100 * gain:.1f}% better), greedy "
                       f"{after.mean_greedy_nll:.3f} (gap {gap:.3f} nats)")


# -- evaluation fidelity -----------------------------------------------------------------


@_timed
def check_evaluator(K=100_000, seed=0, tol=IS_TOL):
    """Importance-sampled NLL at large K against the enumerated log-marginal."""
    rows = []
    for special in (False, True):
        prob = make_problem(seed, D=4, L=1, special=special)
        m = prob.model
        exact = enumerate_elbo(m, prob.x)
        nll = float(is_nll(m, prob.x[None], K, seed)[0])
        rows.append((special, nll, -exact.log_marginal, -exact.elbo))
    worst = max(abs(nll - t) for _, nll, t, _ in rows)
    detail = "; ".join(f"{'q=p' if s else 'q'}: IS {nll:.4f} vs -log p {t:.4f} "
                       f"(-ELBO {e:.4f})" for s, nll, t, e in rows)
    return CheckResult("evaluation fidelity", worst < tol,
                       f"K={K}, max deviation {worst:.4f} nats; {detail}")


# -- format fidelity ---------------------------------------------------------------------


def _params_bytes(state: TrainState):
    return b"".join(p.tobytes() for p in state.model.param_groups().values())


@_timed
def check_formats(seed=0, steps=10):
    """IDX byte round-trip and bit-exact resumption from a checkpoint."""
    rng = substream(seed, "check/formats")
    images = GrayImageSet(rng.integers(0, 256, (7, 5, 3)))
    raw = serialize_idx(images)
    labels = rng.integers(0, 10, 11).astype(np.uint8)
    raw_labels = serialize_idx(labels)
    idx_ok = (serialize_idx(parse_idx(raw)) == raw
              and serialize_idx(parse_idx(raw_labels)) == raw_labels)

    cfg = RunConfig(estimator="sfe-full", baseline="standardize", self_critic="sample",
                    L=2, made_hidden="16", posterior_hidden="16", batch_size=16,
                    synthetic_D=8, synthetic_n=40, synthetic_eval_n=8, seed=seed)
    data = load_data(cfg)
    n = len(data.train)
    per_epoch = -(-n // cfg.batch_size)

    def run(state, upto):
        objs = []
        from .train import epoch_order

        while state.step < upto:
            epoch, pos = divmod(state.step, per_epoch)
            ids = epoch_order(cfg.seed, epoch, n)[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
            objs.append(train_step(state, data.train.bits[ids].astype(float), ids))
        return objs

    straight = TrainState.fresh(cfg, data.train.D)
    objs_a = run(straight, steps)
    resumed = TrainState.fresh(cfg, data.train.D)
    objs_b = run(resumed, steps // 2)
    blob = ckpt_io.to_bytes(resumed.to_checkpoint())
    restored = TrainState.from_checkpoint(ckpt_io.from_bytes(blob))
    objs_b += run(restored, steps)
    traj_ok = (_params_bytes(straight) == _params_bytes(restored)
               and all(np.array_equal(a, b) for a, b in zip(objs_a, objs_b))
               and ckpt_io.to_bytes(straight.to_checkpoint()) == ckpt_io.to_bytes(restored.to_checkpoint()))
    return CheckResult("format fidelity", idx_ok and traj_ok,
                       f"IDX round-trip {'exact' if idx_ok else 'differs'}; {steps}-step "
                       f"resumed trajectory {'bit-exact' if traj_ok else 'differs'}")


SUITES = {
    "gradients": check_gradients,
    "normalisation": check_normalisation,
    "bound": check_bound,
    "unbiasedness": check_unbiasedness,
    "variance": check_variance,
    "ste": check_ste,
    "learning": check_learning,
    "evaluator": check_evaluator,
    "formats": check_formats,
    "greedy": check_greedy,
}
