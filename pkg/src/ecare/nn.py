"""Minimal MLP machinery: He-uniform init, forward/backward, Adam, losses.

Everything runs in float64 numpy. Layers are (weight, bias) pairs with a
rectifier between layers and a linear output. The backward passes here are
checked against central finite differences in the test suite; keep any
change to the math in sync with those checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(Exception):
    """Raised when a forward pass produces non-finite values."""


def init_mlp(dims: list[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """He-style uniform fan-in initialization; biases start at zero."""
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        params.append((w, b))
    return params


def mlp_dims(params: list[tuple[np.ndarray, np.ndarray]]) -> list[int]:
    return [params[0][0].shape[0]] + [w.shape[1] for w, _ in params]


def mlp_forward(
    params: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Forward pass over a batch (rows of x); returns output and caches.

    Each cache entry holds the layer input and pre-activation, which is what
    the backward pass needs.
    """
    caches = []
    h = np.asarray(x, dtype=np.float64)
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        z = h @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite values in layer {i} forward pass")
        caches.append((h, z))
        h = z if i == last else np.maximum(z, 0.0)
    return h, caches


def mlp_backward(
    params: list[tuple[np.ndarray, np.ndarray]],
    caches: list[tuple[np.ndarray, np.ndarray]],
    grad_out: np.ndarray,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate grad_out through the network.

    Returns per-layer (dW, db) plus the gradient w.r.t. the input batch.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore[list-item]
    g = np.asarray(grad_out, dtype=np.float64)
    last = len(params) - 1
    for i in range(last, -1, -1):
        h_in, z = caches[i]
        if i != last:
            g = g * (z > 0.0)
        w, _ = params[i]
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads, g


def zero_grads(params: list[tuple[np.ndarray, np.ndarray]]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]


def add_grads(
    acc: list[tuple[np.ndarray, np.ndarray]], extra: list[tuple[np.ndarray, np.ndarray]]
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(aw + ew, ab + eb) for (aw, ab), (ew, eb) in zip(acc, extra)]


def scale_grads(
    grads: list[tuple[np.ndarray, np.ndarray]], factor: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(w * factor, b * factor) for w, b in grads]


@dataclass
class AdamState:
    """First/second moment buffers and the step counter."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[tuple[np.ndarray, np.ndarray]]) -> "AdamState":
        return cls(m=zero_grads(params), v=zero_grads(params))


def adam_step(
    params: list[tuple[np.ndarray, np.ndarray]],
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: AdamState,
    lr: float,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """One bias-corrected adaptive-moment update; returns new parameters."""
    state.t += 1
    t = state.t
    new_params = []
    for i, ((w, b), (dw, db)) in enumerate(zip(params, grads)):
        mw, mb = state.m[i]
        vw, vb = state.v[i]
        mw = ADAM_BETA1 * mw + (1 - ADAM_BETA1) * dw
        mb = ADAM_BETA1 * mb + (1 - ADAM_BETA1) * db
        vw = ADAM_BETA2 * vw + (1 - ADAM_BETA2) * dw**2
        vb = ADAM_BETA2 * vb + (1 - ADAM_BETA2) * db**2
        state.m[i] = (mw, mb)
        state.v[i] = (vw, vb)
        mw_hat = mw / (1 - ADAM_BETA1**t)
        mb_hat = mb / (1 - ADAM_BETA1**t)
        vw_hat = vw / (1 - ADAM_BETA2**t)
        vb_hat = vb / (1 - ADAM_BETA2**t)
        new_params.append(
            (
                w - lr * mw_hat / (np.sqrt(vw_hat) + ADAM_EPS),
                b - lr * mb_hat / (np.sqrt(vb_hat) + ADAM_EPS),
            )
        )
    return new_params


def copy_params(params: list[tuple[np.ndarray, np.ndarray]]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(w.copy(), b.copy()) for w, b in params]


# -- cosine with gradients -------------------------------------------------


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped matrices."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.einsum("...d,...d->...", a, b) / (na * nb)


def cosine_grad(
    a: np.ndarray, b: np.ndarray, sims: np.ndarray, grad_sims: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of row-wise cosine w.r.t. both inputs.

    d cos/d a = b/(|a||b|) - cos * a/|a|^2, and symmetrically for b.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    g = grad_sims[..., None]
    s = sims[..., None]
    da = g * (b / (na * nb) - s * a / na**2)
    db = g * (a / (na * nb) - s * b / nb**2)
    return da, db


# -- losses ----------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(
    logits: np.ndarray, target_indices: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(target_indices, dtype=np.int64))
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(logp[np.arange(n), targets].mean())
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n
