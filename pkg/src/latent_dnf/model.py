"""The latent-transformation flow model: base distribution, per-layer MADE
conditioners and (optionally) mean-field posterior conditioners."""

from __future__ import annotations

import numpy as np

from .conditioners import MadeConditioner, PosteriorConditioner, made_ordering
from .flow import BaseParams, TransformSequence, intermediate_states, threshold
from .nn import ContractViolation, bernoulli_log_prob

# model-wide masking schemes -> (layer-1 mode, mode for layers >= 2)
MASK_SCHEMES = {
    "prefix": ("strict", "inclusive"),
    "full": ("strict", "full"),
    "unmasked": ("full", "full"),
}


class LatentFlow:
    """p(x) = sum_u p_Y(x xor u^(1) .. xor u^(L)) prod_l p(u^(l) | u^(l-1)).

    ``posterior_hidden=None`` builds a model without a separate posterior, the
    q := p special case (also what STE training uses).
    """

    def __init__(self, D, L, base=None, made_hidden=(512,), posterior_hidden=(512,),
                 mask_scheme="prefix", activation="relu", order_seed=None, rng=None):
        if mask_scheme not in MASK_SCHEMES:
            raise ContractViolation(f"unknown mask scheme {mask_scheme!r}")
        self.D, self.L = int(D), int(L)
        self.base = base if base is not None else BaseParams.constant(D)
        if self.base.D != self.D:
            raise ContractViolation("base dimension differs from D")
        self.mask_scheme = mask_scheme
        self.order = made_ordering(D, order_seed)
        first, rest = MASK_SCHEMES[mask_scheme]
        self.made = [
            MadeConditioner(D, made_hidden, layer=l + 1, cond=first if l == 0 else rest,
                            order=self.order, activation=activation, rng=rng)
            for l in range(self.L)
        ]
        self.posterior = None
        if posterior_hidden is not None:
            self.posterior = [
                PosteriorConditioner(D, posterior_hidden, layer=l + 1,
                                     activation=activation, rng=rng)
                for l in range(self.L)
            ]

    @property
    def special_case(self):
        return self.posterior is None

    @property
    def normalised(self):
        return self.mask_scheme == "prefix"

    def param_groups(self):
        """Flat parameter vectors keyed by group; entries are live views."""
        groups = {"beta": self.base.beta}
        for l, c in enumerate(self.made):
            groups[f"theta{l + 1}"] = c.params
        for l, c in enumerate(self.posterior or []):
            groups[f"lambda{l + 1}"] = c.params
        return groups

    def _check(self, x, uniforms=None):
        x = np.atleast_2d(np.asarray(x))
        if x.shape[1] != self.D:
            raise ContractViolation(f"expected D={self.D}, got {x.shape[1]}")
        if uniforms is not None and np.shape(uniforms) != (x.shape[0], self.L, self.D):
            raise ContractViolation("uniforms must have shape (batch, L, D)")
        return x.astype(float)

    # -- path evaluation and sampling ----------------------------------------

    def evaluate_path(self, x, u):
        """Log-probabilities of given transformations under p (and q)."""
        x = self._check(x)
        u = np.asarray(u, dtype=float).reshape(x.shape[0], self.L, self.D)
        states = intermediate_states(x, u)
        log_p = np.empty(u.shape)
        p_evals = []
        prev = x
        for l, c in enumerate(self.made):
            ev = c.forward(prev, u[:, l])
            log_p[:, l] = bernoulli_log_prob(ev.probs, u[:, l])
            p_evals.append(ev)
            prev = u[:, l]
        log_q, q_evals = None, []
        if self.posterior is not None:
            log_q = np.empty(u.shape)
            prev = x
            for l, c in enumerate(self.posterior):
                ev = c.forward(prev)
                log_q[:, l] = bernoulli_log_prob(ev.probs, u[:, l])
                q_evals.append(ev)
                prev = u[:, l]
        return TransformSequence(u, states, log_p, log_q, p_evals, q_evals)

    def sample_prior(self, x, uniforms):
        """u ~ p(u | x), layer by layer."""
        x = self._check(x, uniforms)
        u = np.zeros((x.shape[0], self.L, self.D))
        prev = x
        for l, c in enumerate(self.made):
            u[:, l] = c.sample_bits(prev, lambda d, p, l=l: uniforms[:, l, d] < p)
            prev = u[:, l]
        return self.evaluate_path(x, u)

    def sample_posterior(self, x, uniforms):
        """u ~ q(u | x); falls back to p in the special case."""
        if self.posterior is None:
            return self.sample_prior(x, uniforms)
        x = self._check(x, uniforms)
        u = np.zeros((x.shape[0], self.L, self.D))
        prev = x
        for l, c in enumerate(self.posterior):
            u[:, l] = (uniforms[:, l] < c.forward(prev).probs).astype(float)
            prev = u[:, l]
        return self.evaluate_path(x, u)

    def greedy(self, x, source=None):
        """Layer-wise thresholded transformation (a deterministic flow)."""
        source = source or ("generative" if self.posterior is None else "posterior")
        x = self._check(x)
        u = np.zeros((x.shape[0], self.L, self.D))
        prev = x
        for l in range(self.L):
            if source == "posterior":
                u[:, l] = threshold(self.posterior[l].forward(prev).probs)
            elif source == "generative":
                u[:, l] = self.made[l].sample_bits(prev, lambda d, p: p > 0.5)
            else:
                raise ContractViolation(f"unknown greedy source {source!r}")
            prev = u[:, l]
        return self.evaluate_path(x, u)

    def sample_data(self, uniforms_u, uniforms_y):
        """Draw x in the generative direction.

        Works position by position in the autoregressive order: at position d
        every layer's bit is drawn (layer 1 reads x before d, layer l reads
        u^(l-1) up to d), then y_d ~ Bern(beta_d) and x_d = y_d xor u_d.
        """
        if not self.normalised:
            raise ContractViolation("sampling needs the 'prefix' mask scheme")
        B = uniforms_y.shape[0]
        x = np.zeros((B, self.D))
        u = np.zeros((B, self.L, self.D))
        beta = self.base.beta
        for d in np.argsort(self.order):
            prev = x
            for l, c in enumerate(self.made):
                p = c.forward(prev, u[:, l]).probs[:, d]
                u[:, l, d] = uniforms_u[:, l, d] < p
                prev = u[:, l]
            y_d = (uniforms_y[:, d] < beta[d]).astype(float)
            x[:, d] = (y_d + u[:, :, d].sum(axis=1)) % 2
        return x.astype(np.uint8), u.astype(np.uint8)


def greedy_transform(model: LatentFlow, x, source=None):
    return model.greedy(x, source)
