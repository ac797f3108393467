"""Autoregressive (MADE) generative conditioner and mean-field posterior
conditioner, one of each per flow layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    _ACTIVATIONS,
    ContractViolation,
    MaskedMLP,
    Tape,
    bernoulli_entropy,
    bernoulli_entropy_grad_logits,
    bernoulli_log_prob,
    bernoulli_score_logits,
    sigmoid,
)

# How a MADE output d may read the conditioning vector u^(l-1):
#   strict    - only positions strictly before d (required at layer 1, where
#               the conditioning vector is x itself)
#   inclusive - positions up to and including d (largest dependence that keeps
#               p_X normalised for layers >= 2)
#   full      - every position (does NOT give a normalised p_X)
COND_MODES = ("strict", "inclusive", "full")


def made_ordering(D, seed=None):
    """Position (1..D) of every dimension in the autoregressive order."""
    if seed is None:
        return np.arange(1, D + 1)
    perm = np.random.default_rng(seed).permutation(D)
    pos = np.empty(D, dtype=int)
    pos[perm] = np.arange(1, D + 1)
    return pos


@dataclass
class MadeMasks:
    masks: list[np.ndarray]
    input_degrees: np.ndarray
    hidden_degrees: list[np.ndarray]
    output_degrees: np.ndarray


def _spread(lo, hi, n):
    if hi < lo:
        return np.full(n, lo)
    return lo + (np.arange(n) * (hi - lo + 1)) // n


def build_made_masks(D, hidden_sizes, cond="strict", order=None):
    """Masks for a MADE over inputs ``[u_prev (D), u_curr (D)]`` -> D outputs.

    Output d connects (through the hidden stack) to current-layer inputs at
    earlier positions only; the conditioning inputs are masked per ``cond``.
    Hidden degrees are spread evenly and deterministically.
    """
    if D < 1 or any(h < 1 for h in hidden_sizes):
        raise ContractViolation("D and hidden sizes must be >= 1")
    if cond not in COND_MODES:
        raise ContractViolation(f"unknown conditioning mode {cond!r}")
    pos = made_ordering(D) if order is None else np.asarray(order)
    cond_deg = {"strict": pos, "inclusive": pos - 1, "full": np.zeros(D, dtype=int)}[cond]
    in_deg = np.concatenate([cond_deg, pos])
    lo = min(int(in_deg.min()), D - 1)
    masks, hidden = [], []
    prev = in_deg
    for h in hidden_sizes:
        deg = _spread(lo, D - 1, h)
        masks.append((deg[:, None] >= prev[None, :]).astype(float))
        hidden.append(deg)
        prev = deg
    masks.append((pos[:, None] > prev[None, :]).astype(float))
    return MadeMasks(masks, in_deg, hidden, pos.copy())


@dataclass
class CondEval:
    logits: np.ndarray
    probs: np.ndarray
    tape: Tape


def _as_batch(a, D):
    a = np.asarray(a, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[-1] != D:
        raise ContractViolation(f"expected length {D}, got {a.shape[-1]}")
    return a, single


class MadeConditioner:
    """Generative conditioner p(u^(l) | u^(l-1), theta_l).

    ``f_d`` reads ``u^(l)`` only through earlier positions, so one forward pass
    on the complete ``u^(l)`` yields every conditional simultaneously.
    """

    def __init__(self, D, hidden_sizes=(512,), layer=1, cond=None, order=None,
                 activation="relu", rng=None):
        self.D = D
        self.layer = layer
        self.hidden_sizes = tuple(hidden_sizes)
        self.cond = cond or ("strict" if layer == 1 else "inclusive")
        self.order = made_ordering(D) if order is None else np.asarray(order)
        self.sequence = np.argsort(self.order)
        self.made = build_made_masks(D, self.hidden_sizes, self.cond, self.order)
        self.net = MaskedMLP([2 * D, *self.hidden_sizes, D], self.made.masks,
                             activation=activation, rng=rng)

    @property
    def params(self):
        return self.net.params

    def forward(self, u_prev, u_curr):
        u_prev, _ = _as_batch(u_prev, self.D)
        u_curr, _ = _as_batch(u_curr, self.D)
        z, tape = self.net.forward(np.concatenate([u_prev, u_curr], axis=1))
        return CondEval(z, sigmoid(z), tape)

    def probs(self, u_prev, u_curr):
        single = np.ndim(u_prev) == 1
        p = self.forward(u_prev, u_curr).probs
        return p[0] if single else p

    def log_prob(self, u_prev, u):
        """Returns ``(total, per_dim)`` log p(u | u_prev)."""
        single = np.ndim(u) == 1
        ev = self.forward(u_prev, u)
        per_dim = bernoulli_log_prob(ev.probs, np.atleast_2d(u))
        total = per_dim.sum(axis=1)
        return (total[0], per_dim[0]) if single else (total, per_dim)

    def score_cotangent(self, ev, u):
        return bernoulli_score_logits(ev.logits, np.atleast_2d(u))

    def backward(self, ev, cot_logits, per_example=False):
        """Returns ``(param_grad, grad_u_prev, grad_u_curr)``."""
        g, gin = self.net.backward(ev.tape, cot_logits, per_example)
        return g, gin[:, : self.D], gin[:, self.D :]

    def sample(self, u_prev, uniforms):
        """Draw u^(l) one position at a time; bit d is ``uniforms[d] < f_d``.

        Returns ``(u, per_dim_log_prob)``; log-probs come from a single full
        pass over the drawn ``u`` so they equal :meth:`log_prob` exactly.
        """
        single = np.ndim(u_prev) == 1
        u_prev, _ = _as_batch(u_prev, self.D)
        uniforms, _ = _as_batch(uniforms, self.D)
        u = self.sample_bits(u_prev, lambda d, p: uniforms[:, d] < p)
        _, per_dim = self.log_prob(u_prev, u)
        return (u[0], per_dim[0]) if single else (u, per_dim)

    def sample_bits(self, u_prev, decide):
        """Sequential decoding where ``decide(d, p_d)`` picks bit d from its
        conditional probability (sampling or thresholding)."""
        B, D = u_prev.shape[0], self.D
        u = np.zeros((B, D))
        net = self.net
        if len(net.layers) == 2:
            # one hidden layer: update hidden pre-activations incrementally
            w1 = net.layers[0].effective()
            w2 = net.layers[1].effective()
            b2 = net.layers[1].bias
            act = _ACTIVATIONS[net.activation][0]
            pre = u_prev @ w1[:, :D].T + net.layers[0].bias
            for d in self.sequence:
                h = act(pre)
                p = sigmoid(h @ w2[d] + b2[d])
                bit = decide(d, p).astype(float)
                u[:, d] = bit
                pre = pre + bit[:, None] * w1[None, :, D + d]
        else:
            for d in self.sequence:
                p = self.forward(u_prev, u).probs[:, d]
                u[:, d] = decide(d, p).astype(float)
        return u


class PosteriorConditioner:
    """Mean-field posterior q(u^(l) | u^(l-1), lambda_l); no masking."""

    def __init__(self, D, hidden_sizes=(512,), layer=1, activation="relu", rng=None):
        self.D = D
        self.layer = layer
        self.hidden_sizes = tuple(hidden_sizes)
        self.net = MaskedMLP([D, *self.hidden_sizes, D], activation=activation, rng=rng)

    @property
    def params(self):
        return self.net.params

    def forward(self, u_prev):
        u_prev, _ = _as_batch(u_prev, self.D)
        z, tape = self.net.forward(u_prev)
        return CondEval(z, sigmoid(z), tape)

    def probs(self, u_prev):
        single = np.ndim(u_prev) == 1
        p = self.forward(u_prev).probs
        return p[0] if single else p

    def log_prob(self, u_prev, u):
        single = np.ndim(u) == 1
        ev = self.forward(u_prev)
        per_dim = bernoulli_log_prob(ev.probs, np.atleast_2d(u))
        total = per_dim.sum(axis=1)
        return (total[0], per_dim[0]) if single else (total, per_dim)

    def sample(self, u_prev, uniforms):
        single = np.ndim(u_prev) == 1
        ev = self.forward(u_prev)
        uniforms, _ = _as_batch(uniforms, self.D)
        u = (uniforms < ev.probs).astype(float)
        per_dim = bernoulli_log_prob(ev.probs, u)
        return (u[0], per_dim[0]) if single else (u, per_dim)

    def entropy(self, u_prev):
        """Closed-form sum of per-dimension Bernoulli entropies."""
        single = np.ndim(u_prev) == 1
        ev = self.forward(u_prev)
        h = bernoulli_entropy(ev.probs).sum(axis=1)
        return h[0] if single else h

    def score_cotangent(self, ev, u):
        return bernoulli_score_logits(ev.logits, np.atleast_2d(u))

    def entropy_cotangent(self, ev):
        return bernoulli_entropy_grad_logits(ev.logits)

    def backward(self, ev, cot_logits, per_example=False):
        """Returns ``(param_grad, grad_u_prev)``."""
        return self.net.backward(ev.tape, cot_logits, per_example)
