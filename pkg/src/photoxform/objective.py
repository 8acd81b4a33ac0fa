"""Cross-view descriptor loss: softmax over a two-view distance matrix plus an L1 weight penalty."""

from __future__ import annotations

import numpy as np

from .errors import ContractError

DEFAULT_LAMBDA = 3.0


def logsumexp(a, axis, keepdims=False):
    peak = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - peak), axis=axis, keepdims=True)) + peak
    return out if keepdims else np.squeeze(out, axis=axis)


def distance_matrix(h1, h2) -> np.ndarray:
    """``D[i, j] = ||h1[i] - h2[j]||`` for the two views' features, each ``(k, F)``."""
    h1 = np.atleast_2d(h1)
    h2 = np.atleast_2d(h2)
    if h1.shape != h2.shape:
        raise ContractError(f"view feature shapes differ: {h1.shape} vs {h2.shape}")
    diff = h1[:, None, :] - h2[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def distance_matrix_backward(h1, h2, D, dD):
    """Gradients of a scalar w.r.t. ``h1`` and ``h2`` given ``dD = d(scalar)/dD``."""
    diff = h1[:, None, :] - h2[None, :, :]
    w = dD / np.maximum(D, 1e-12)
    g = w[..., None] * diff
    return g.sum(axis=1), -g.sum(axis=0)


def softmaxes(D, literal: bool = False):
    """Row- and column-wise softmax of ``-D`` (or of ``+D`` when ``literal``)."""
    logits = D if literal else -D
    s_row = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    s_col = np.exp(logits - logsumexp(logits, axis=0, keepdims=True))
    return s_row, s_col


def loss_main(D, literal: bool = False):
    """Returns ``(L_main, dL/dD)``.

    By default similarities are ``exp(-d)``, so minimizing the loss pulls
    matching pairs together.  ``literal=True`` uses ``exp(+d)``.
    """
    D = np.asarray(D, dtype=np.float64)
    if not np.all(np.isfinite(D)):
        raise ContractError("distance matrix has non-finite entries")
    if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] < 1:
        raise ContractError("distance matrix must be square and non-empty")
    logits = D if literal else -D
    diag = np.diag(logits)
    lse_row = logsumexp(logits, axis=1, keepdims=True)
    lse_col = logsumexp(logits, axis=0, keepdims=True)
    loss = -0.5 * (np.sum(diag - lse_col[0]) + np.sum(diag - lse_row[:, 0]))

    s_row = np.exp(logits - lse_row)
    s_col = np.exp(logits - lse_col)
    eye = np.eye(len(D))
    grad = 0.5 * ((s_row - eye) + (s_col - eye))
    if not literal:
        grad = -grad
    return float(loss), grad


def loss_reg(weights) -> tuple[float, np.ndarray]:
    """Sum of absolute values of the combining-layer weights, with its subgradient."""
    w = np.asarray(weights)
    return float(np.sum(np.abs(w, dtype=np.float64))), np.sign(w)


def pair_loss(h1, h2, literal: bool = False):
    """L_main on a feature batch; returns ``(loss, dh1, dh2)``."""
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    D = distance_matrix(h1, h2)
    loss, dD = loss_main(D, literal)
    dh1, dh2 = distance_matrix_backward(h1, h2, D, dD)
    return loss, dh1, dh2
