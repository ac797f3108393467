"""XOR flow primitives: the bijection, layer stacking, factorised Bernoulli
base distribution and the hard threshold."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import EPS_P, ContractViolation, bernoulli_log_prob


@dataclass
class BaseParams:
    beta: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.beta < EPS_P) or np.any(self.beta > 1.0 - EPS_P):
            raise ContractViolation("base probabilities outside the clamp range")

    @classmethod
    def constant(cls, D, value=0.1, frozen=True):
        return cls(np.full(D, float(value)), frozen)

    @property
    def D(self):
        return self.beta.size


@dataclass
class TransformSequence:
    """Sampled or chosen transformations for a batch.

    ``u`` and ``log_p``/``log_q`` have shape (batch, L, D); ``states`` holds
    x^(0) .. x^(L) with shape (batch, L + 1, D). The ``*_evals`` lists keep the
    conditioner forward passes so gradients can be taken without recomputing.
    """

    u: np.ndarray
    states: np.ndarray
    log_p: np.ndarray | None
    log_q: np.ndarray | None = None
    p_evals: list = field(default_factory=list, repr=False)
    q_evals: list = field(default_factory=list, repr=False)

    @property
    def y(self):
        return self.states[:, -1]

    @property
    def L(self):
        return self.u.shape[1]


def _bits(a):
    return np.asarray(a).astype(np.uint8)


def xor_transform(a, u):
    a, u = np.asarray(a), np.asarray(u)
    if a.shape[-1] != u.shape[-1]:
        raise ContractViolation(f"length mismatch {a.shape[-1]} vs {u.shape[-1]}")
    return np.bitwise_xor(_bits(a), _bits(u))


def intermediate_states(x, u):
    """x^(0) = x, x^(l) = x^(l-1) xor u^(l). ``u`` has shape (..., L, D)."""
    x = _bits(x)
    u = _bits(u)
    if u.shape[-1] != x.shape[-1]:
        raise ContractViolation("layer length differs from data length")
    states = [x]
    for l in range(u.shape[-2]):
        states.append(np.bitwise_xor(states[-1], u[..., l, :]))
    return np.stack(states, axis=-2)


def apply_stack(x, u_seq):
    u = u_seq.u if isinstance(u_seq, TransformSequence) else u_seq
    return intermediate_states(x, u)[..., -1, :]


def base_log_prob(y, base: BaseParams):
    """Returns ``(per_dim, total)``; per-dim terms are the rewards r_d."""
    y = np.asarray(y)
    if y.shape[-1] != base.D:
        raise ContractViolation(f"length mismatch {y.shape[-1]} vs {base.D}")
    per_dim = bernoulli_log_prob(base.beta, y)
    return per_dim, per_dim.sum(axis=-1)


def threshold(o):
    return (np.asarray(o) > 0.5).astype(np.uint8)


def deterministic_flow_nll(x, u_star, base: BaseParams):
    return -base_log_prob(apply_stack(x, u_star), base)[1]
