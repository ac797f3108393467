"""Small numpy substrate: masked affine layers, sigmoid/Bernoulli helpers,
hand-written reverse mode and Adam.

Everything is batched along the leading axis. Parameters of a network live in
one flat float64 vector; per-layer weights and biases are views into it, so an
in-place optimiser update is immediately visible to the layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

EPS_P = 1e-7


class ContractViolation(ValueError):
    """Raised when an operation is called outside its stated preconditions."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


# -- elementwise helpers -----------------------------------------------------


def sigmoid(z):
    """Logistic function, clamped to [EPS_P, 1 - EPS_P]."""
    return np.clip(expit(z), EPS_P, 1.0 - EPS_P)


def sigmoid_grad(z):
    """Derivative of the *clamped* sigmoid (zero where the clamp is active)."""
    s = expit(z)
    inside = (s > EPS_P) & (s < 1.0 - EPS_P)
    return np.where(inside, s * (1.0 - s), 0.0)


def bernoulli_log_prob(p, bit):
    p = np.asarray(p, dtype=float)
    if np.any(p < EPS_P) or np.any(p > 1.0 - EPS_P):
        raise ContractViolation("probability outside the clamp range")
    bit = np.asarray(bit, dtype=float)
    return bit * np.log(p) + (1.0 - bit) * np.log1p(-p)


def bernoulli_log_prob_grad_p(p, bit):
    bit = np.asarray(bit, dtype=float)
    return bit / p - (1.0 - bit) / (1.0 - p)


def bernoulli_score_logits(z, bit):
    """d/dz log Bern(bit | sigmoid(z)), consistent with the clamp."""
    s = expit(z)
    inside = (s > EPS_P) & (s < 1.0 - EPS_P)
    return np.where(inside, np.asarray(bit, dtype=float) - s, 0.0)


def bernoulli_entropy(p):
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))


def bernoulli_entropy_grad_logits(z):
    p = sigmoid(z)
    return (np.log1p(-p) - np.log(p)) * sigmoid_grad(z)


# -- layers ------------------------------------------------------------------


@dataclass
class MaskedAffine:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    mask: np.ndarray  # (out, in), entries in {0, 1}

    def effective(self):
        return self.weights * self.mask


def masked_affine_forward(layer: MaskedAffine, inputs):
    inputs = np.asarray(inputs, dtype=float)
    if inputs.shape[-1] != layer.weights.shape[1]:
        raise ContractViolation(
            f"input length {inputs.shape[-1]} != layer fan-in {layer.weights.shape[1]}"
        )
    return inputs @ layer.effective().T + layer.bias


@dataclass
class Tape:
    """Forward intermediates of one MaskedMLP pass: the input to every affine
    layer and every pre-activation."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self):
        return self.preacts[-1]


_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "sigmoid": (expit, lambda z: expit(z) * (1.0 - expit(z))),
}


class MaskedMLP:
    """Feed-forward stack of masked affine layers with a hidden nonlinearity.

    The network outputs logits; callers apply :func:`sigmoid`. Passing no masks
    gives a dense network.
    """

    def __init__(self, sizes, masks=None, activation="relu", rng=None, dtype=np.float64):
        if len(sizes) < 2:
            raise ContractViolation("need at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.dtype = np.dtype(dtype)
        shapes = list(zip(self.sizes[1:], self.sizes[:-1]))
        if masks is None:
            masks = [np.ones(s) for s in shapes]
        if len(masks) != len(shapes) or any(m.shape != s for m, s in zip(masks, shapes)):
            raise ContractViolation("mask shapes do not match layer sizes")
        n = sum(o * i + o for o, i in shapes)
        self.params = np.zeros(n)
        self.layers: list[MaskedAffine] = []
        off = 0
        for (o, i), m in zip(shapes, masks):
            w = self.params[off : off + o * i].reshape(o, i)
            off += o * i
            b = self.params[off : off + o]
            off += o
            self.layers.append(MaskedAffine(w, b, np.asarray(m, dtype=float)))
        if rng is not None:
            self.reset_parameters(rng)

    @property
    def n_params(self):
        return self.params.size

    def reset_parameters(self, rng):
        """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
        for layer in self.layers:
            s = 1.0 / np.sqrt(layer.weights.shape[1])
            layer.weights[...] = rng.uniform(-s, s, size=layer.weights.shape)
            layer.bias[...] = 0.0

    def forward(self, inputs):
        act, _ = _ACTIVATIONS[self.activation]
        h = np.asarray(inputs, dtype=self.dtype)
        if h.shape[-1] != self.sizes[0]:
            raise ContractViolation(f"input length {h.shape[-1]} != {self.sizes[0]}")
        tape = Tape()
        for k, layer in enumerate(self.layers):
            tape.inputs.append(h)
            w = layer.effective().astype(self.dtype, copy=False)
            z = h @ w.T + layer.bias.astype(self.dtype, copy=False)
            tape.preacts.append(z)
            h = act(z) if k < len(self.layers) - 1 else z
        return tape.output, tape

    def backward(self, tape: Tape, cotangent, per_example=False):
        """Reverse pass for the contraction <cotangent, logits>.

        Returns ``(param_grad, input_grad)``. ``param_grad`` is flat, shape
        ``(n_params,)`` summed over the batch, or ``(batch, n_params)`` when
        ``per_example`` is set.
        """
        _, dact = _ACTIVATIONS[self.activation]
        g = np.asarray(cotangent, dtype=self.dtype)
        if g.shape != tape.output.shape:
            raise ContractViolation(f"cotangent shape {g.shape} != output {tape.output.shape}")
        batch = g.shape[0]
        pieces = []
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h = tape.inputs[k]
            if per_example:
                gw = np.einsum("bo,bi->boi", g, h) * layer.mask
                pieces.append((gw.reshape(batch, -1), g))
            else:
                gw = (g.T @ h) * layer.mask
                pieces.append((gw.ravel(), g.sum(axis=0)))
            g = g @ layer.effective()
            if k > 0:
                g = g * dact(tape.preacts[k - 1])
        flat = []
        for gw, gb in reversed(pieces):
            flat.extend([gw, gb])
        grad = np.concatenate(flat, axis=-1).astype(np.float64, copy=False)
        return grad, g


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params, grads, state: AdamState, group="params"):
    """One descent step on ``grads``. Returns ``(new_params, state)``; the
    state's moment buffers are updated in place."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ContractViolation("parameter, gradient and moment lengths differ")
    if state.step < 0:
        raise ContractViolation("negative Adam step counter")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient(group)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state
