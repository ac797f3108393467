"""Gradient estimators for the latent-transformation flow.

All estimators return ascent directions on the objective being maximised (the
ELBO, the q := p bound, or the negative STE loss) as a dict keyed by parameter
group (``beta``, ``theta<l>``, ``lambda<l>``). Gradients are summed over the
batch, or kept per example (shape ``(batch, n_params)``) with
``per_example=True``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import TransformSequence, base_log_prob
from .model import LatentFlow
from .nn import ContractViolation, sigmoid_grad

KINDS = ("sfe-full", "sfe-special", "ste")
CRITICS = ("none", "sample", "greedy")
BASELINES = ("none", "mean", "standardize")
CREDITS = ("per_dim", "strict")


@dataclass
class EstimatorConfig:
    kind: str = "sfe-full"
    self_critic: str = "none"
    baseline: str = "none"
    gamma_kl: float = 1.0
    gamma_prefix: float = 0.0
    samples: int = 1
    ema_decay: float = 0.9
    var_floor: float = 1.0
    # per_dim pairs reward d with the score of u_d only (exact for L = 1);
    # strict pairs every layer's score with the summed downstream signal
    credit: str = "per_dim"
    entropy_factoring: bool = True
    ste_detach_inputs: bool = False

    def __post_init__(self):
        for name, value, allowed in [("kind", self.kind, KINDS),
                                     ("self_critic", self.self_critic, CRITICS),
                                     ("baseline", self.baseline, BASELINES),
                                     ("credit", self.credit, CREDITS)]:
            if value not in allowed:
                raise ContractViolation(f"{name} must be one of {allowed}, got {value!r}")
        for name in ("gamma_kl", "gamma_prefix"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ContractViolation(f"{name} must be finite and >= 0")
        if self.samples < 1:
            raise ContractViolation("samples must be >= 1")


@dataclass
class BaselineState:
    """Exponential moving mean/variance of a learning signal, per column."""

    mean: np.ndarray
    var: np.ndarray
    decay: float = 0.9
    floor: float = 1.0

    @classmethod
    def fresh(cls, n, decay=0.9, floor=1.0):
        return cls(np.zeros(n), np.full(n, floor**2), decay, floor)

    @property
    def std(self):
        return np.maximum(np.sqrt(self.var), self.floor)

    def update(self, signal):
        signal = np.atleast_2d(signal)
        a = self.decay
        self.mean = a * self.mean + (1 - a) * signal.mean(axis=0)
        self.var = a * self.var + (1 - a) * ((signal - self.mean) ** 2).mean(axis=0)


def standardize(signal, state: BaselineState, mode="standardize", update=True):
    """Centre (and scale) ``signal`` with the state's running moments, then
    fold the batch into the state. Returns ``(normalised, state)``."""
    signal = np.asarray(signal, dtype=float)
    if mode == "none":
        out = signal
    elif mode == "mean":
        out = signal - state.mean
    elif mode == "standardize":
        out = (signal - state.mean) / state.std
    else:
        raise ContractViolation(f"unknown baseline mode {mode!r}")
    if update and mode != "none":
        state.update(signal)
    return out, state


@dataclass
class Baselines:
    recon: BaselineState
    kl: list[BaselineState] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: LatentFlow, cfg: EstimatorConfig):
        n = 1 if cfg.credit == "strict" and cfg.kind == "sfe-full" else model.D
        kw = dict(decay=cfg.ema_decay, floor=cfg.var_floor)
        kl = [] if model.special_case else [BaselineState.fresh(model.D + 1, **kw)
                                            for _ in range(model.L)]
        return cls(BaselineState.fresh(n, **kw), kl)


@dataclass
class GradAccumulator:
    grads: dict[str, np.ndarray]
    estimator: str
    count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ContractViolation("sample count must be >= 1")

    def add(self, other: dict):
        for k, g in other.items():
            self.grads[k] = self.grads[k] + g if k in self.grads else np.array(g, dtype=float)

    def mean(self):
        return {k: g / self.count for k, g in self.grads.items()}

    def check_finite(self):
        for k, g in self.grads.items():
            if not np.all(np.isfinite(g)):
                return k
        return None


def _reduce(g, per_example):
    return g if per_example else g.sum(axis=0)


def _suffix_sum(values, order, inclusive=True):
    """Sum over positions at or after (or strictly after) each position in the
    autoregressive order. ``values`` has shape (batch, D)."""
    seq = np.argsort(order)
    v = values[:, seq]
    rev = np.cumsum(v[:, ::-1], axis=1)[:, ::-1]
    if not inclusive:
        rev = rev - v
    out = np.empty_like(values)
    out[:, seq] = rev
    return out


def rewards(model: LatentFlow, path: TransformSequence):
    """Per-dimension rewards r_d = log p_Y(x_d xor u_d^(1) .. xor u_d^(L))."""
    return base_log_prob(path.y, model.base)[0]


def elbo_sample(model: LatentFlow, path: TransformSequence):
    """Single-sample ELBO per example (reduces to log p_Y when q := p)."""
    lpy = base_log_prob(path.y, model.base)[1]
    if model.special_case:
        return lpy
    return lpy + path.log_p.sum(axis=(1, 2)) - path.log_q.sum(axis=(1, 2))


def elbo_estimate(model: LatentFlow, x, uniforms):
    """Monte Carlo ELBO per example; ``uniforms`` has shape (batch, K, L, D)."""
    x = np.atleast_2d(x)
    B, K = uniforms.shape[:2]
    xs = np.repeat(x, K, axis=0)
    path = model.sample_posterior(xs, uniforms.reshape(B * K, model.L, model.D))
    return elbo_sample(model, path).reshape(B, K).mean(axis=1)


# -- exact-path gradients ------------------------------------------------------


def grad_beta(model: LatentFlow, path: TransformSequence, per_example=False):
    y = path.y.astype(float)
    beta = model.base.beta
    return _reduce(y / beta - (1 - y) / (1 - beta), per_example)


def grad_theta(model: LatentFlow, path: TransformSequence, per_example=False):
    out = {}
    for l, c in enumerate(model.made):
        ev = path.p_evals[l]
        out[f"theta{l + 1}"] = c.backward(ev, c.score_cotangent(ev, path.u[:, l]), per_example)[0]
    return out


# -- score-function estimators ----------------------------------------------------


def grad_lambda_reconstruction(model: LatentFlow, path, baseline: BaselineState,
                               cfg: EstimatorConfig, critic_path=None,
                               per_example=False, update=True):
    """SFE for grad_lambda E_q[log p_Y(t(x; u))] with optional self-critic and
    running baselines."""
    if model.special_case:
        raise ContractViolation("reconstruction SFE needs a posterior")
    signal = rewards(model, path)
    if cfg.self_critic != "none":
        if critic_path is None:
            raise ContractViolation("self-critic enabled but no critic sample given")
        signal = signal - rewards(model, critic_path)
    if cfg.credit == "strict":
        signal = signal.sum(axis=1, keepdims=True)
    signal, _ = standardize(signal, baseline, cfg.baseline, update)
    out = {}
    for l, c in enumerate(model.posterior):
        ev = path.q_evals[l]
        cot = signal * c.score_cotangent(ev, path.u[:, l])
        out[f"lambda{l + 1}"] = c.backward(ev, cot, per_example)[0]
    return out


def grad_lambda_kl(model: LatentFlow, path, baselines: list[BaselineState],
                   cfg: EstimatorConfig, per_example=False, update=True):
    """Local SFE for grad_lambda (-KL(q || p)), one layer at a time.

    Layer l's score is weighted by its own log-ratio (with the entropy taken in
    closed form and the cross-entropy credited by suffix) plus ``gamma_kl``
    times the next layer's log-ratio. With ``credit="strict"`` the second
    signal covers every later layer, which keeps the estimator unbiased for
    L > 2.
    """
    if model.special_case:
        raise ContractViolation("KL SFE needs a posterior")
    L, D = model.L, model.D
    ratio = (path.log_p - path.log_q).sum(axis=2)  # (B, L)
    out = {}
    for l, c in enumerate(model.posterior):
        ev = path.q_evals[l]
        score = c.score_cotangent(ev, path.u[:, l])
        cot = np.zeros_like(score)
        if cfg.entropy_factoring:
            cot += c.entropy_cotangent(ev)
            own = _suffix_sum(path.log_p[:, l], model.order)
        else:
            own = np.repeat(ratio[:, l : l + 1], D, axis=1)
        if l + 1 < L:
            later = ratio[:, l + 1 :] if cfg.credit == "strict" else ratio[:, l + 1 : l + 2]
            nxt = later.sum(axis=1, keepdims=True)
        else:
            nxt = np.zeros((score.shape[0], 1))
        sig, _ = standardize(np.concatenate([own, nxt], axis=1), baselines[l],
                             cfg.baseline, update)
        cot += sig[:, :D] * score
        if l + 1 < L:
            cot += cfg.gamma_kl * sig[:, D:] * score
        out[f"lambda{l + 1}"] = c.backward(ev, cot, per_example)[0]
    return out


def special_case_grad(model: LatentFlow, path, baseline: BaselineState,
                      cfg: EstimatorConfig, prefix_path=None, critic_path=None,
                      per_example=False, update=True):
    """grad_theta E_p[log p_Y(t(x; u))] with q := p.

    Term 1 pairs reward d with the score of position d in every layer. Term 2,
    scaled by ``gamma_prefix``, pairs the reward of an independent sample u'
    with the score of that sample's prefix before d; with ``gamma_prefix = 1``
    the sum is unbiased, with 0 it is the impatient (biased) variant.
    """
    if cfg.gamma_prefix > 0 and prefix_path is None:
        raise ContractViolation("gamma_prefix > 0 needs an independent second sample")
    critic = 0.0
    if cfg.self_critic != "none":
        if critic_path is None:
            raise ContractViolation("self-critic enabled but no critic sample given")
        critic = rewards(model, critic_path)
    signal, _ = standardize(rewards(model, path) - critic, baseline, cfg.baseline, update)
    prefix_signal = None
    if cfg.gamma_prefix > 0:
        s2, _ = standardize(rewards(model, prefix_path) - critic, baseline,
                            cfg.baseline, update=False)
        prefix_signal = cfg.gamma_prefix * _suffix_sum(s2, model.order, inclusive=False)
    out = {}
    for l, c in enumerate(model.made):
        ev = path.p_evals[l]
        g = c.backward(ev, signal * c.score_cotangent(ev, path.u[:, l]), per_example)[0]
        if prefix_signal is not None:
            ev2 = prefix_path.p_evals[l]
            cot2 = prefix_signal * c.score_cotangent(ev2, prefix_path.u[:, l])
            g = g + c.backward(ev2, cot2, per_example)[0]
        out[f"theta{l + 1}"] = g
    return out


# -- straight-through baseline --------------------------------------------------


def ste_step(model: LatentFlow, x, per_example=False, detach_inputs=False):
    """Deterministic flow u^(l) = threshold(f(.)) with the threshold's Jacobian
    replaced by the identity.

    XOR is differentiated through its multilinear extension, so
    d y_d / d u_d^(l) = 1 - 2 (y_d xor u_d^(l)). Unless ``detach_inputs`` is
    set, the proxy gradient also flows into the MADE's own autoregressive inputs
    and into the next layer's conditioning input; the strictly triangular
    dependence is resolved exactly by D fixed-point sweeps.

    Returns ``(loss per example, grads)`` where grads ascend ``-loss``.
    """
    path = model.greedy(x, source="generative")
    lpy_dim, lpy = base_log_prob(path.y, model.base)
    beta = model.base.beta
    g_y = np.broadcast_to(np.log(beta) - np.log1p(-beta), path.y.shape)
    carry = np.zeros(path.y.shape)
    out = {}
    for l in range(model.L - 1, -1, -1):
        c = model.made[l]
        ev = path.p_evals[l]
        dz = sigmoid_grad(ev.logits)
        flip = 1.0 - 2.0 * np.bitwise_xor(path.y, path.u[:, l].astype(np.uint8))
        ext = g_y * flip + carry
        g_u = ext
        if not detach_inputs:
            for _ in range(model.D):
                _, _, g_auto = c.backward(ev, g_u * dz)
                g_new = ext + g_auto
                if np.array_equal(g_new, g_u):
                    break
                g_u = g_new
        g_theta, g_prev, _ = c.backward(ev, g_u * dz)
        if per_example:
            g_theta = c.backward(ev, g_u * dz, per_example=True)[0]
        out[f"theta{l + 1}"] = g_theta
        carry = g_prev if not detach_inputs else np.zeros_like(carry)
    out["beta"] = grad_beta(model, path, per_example)
    return -lpy, out


# -- one training/benchmark step -------------------------------------------------


def estimate_gradients(model: LatentFlow, x, cfg: EstimatorConfig, baselines: Baselines,
                       uniforms, per_example=False, update=True):
    """Full gradient estimate for a batch.

    ``uniforms`` maps "main" (and "critic"/"prefix" when needed) to arrays of
    shape (batch, L, D). Returns ``(objective per example, GradAccumulator)``.
    """
    x = np.atleast_2d(x)
    acc = GradAccumulator({}, cfg.kind)
    if cfg.kind == "ste":
        loss, grads = ste_step(model, x, per_example, cfg.ste_detach_inputs)
        if model.base.frozen:
            grads.pop("beta")
        acc.add(grads)
        return -loss, acc

    main = (model.sample_prior if cfg.kind == "sfe-special" else model.sample_posterior)(
        x, uniforms["main"])
    critic = None
    if cfg.self_critic == "sample":
        sampler = model.sample_prior if cfg.kind == "sfe-special" else model.sample_posterior
        critic = sampler(x, uniforms["critic"])
    elif cfg.self_critic == "greedy":
        critic = model.greedy(x)
    if not model.base.frozen:
        acc.add({"beta": grad_beta(model, main, per_example)})
    if cfg.kind == "sfe-special":
        prefix = model.sample_prior(x, uniforms["prefix"]) if cfg.gamma_prefix > 0 else None
        acc.add(special_case_grad(model, main, baselines.recon, cfg, prefix, critic,
                                  per_example, update))
        return base_log_prob(main.y, model.base)[1], acc
    if model.special_case:
        raise ContractViolation("sfe-full needs a model with a posterior")
    acc.add(grad_theta(model, main, per_example))
    acc.add(grad_lambda_reconstruction(model, main, baselines.recon, cfg, critic,
                                       per_example, update))
    acc.add(grad_lambda_kl(model, main, baselines.kl, cfg, per_example, update))
    return elbo_sample(model, main), acc
