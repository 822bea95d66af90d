"""Energy-based reading of a classifier.

Logits act as negative energies, so the unnormalized marginal
log-likelihood of an input is the logsumexp of its logits; the partition
function cancels in every difference and every input gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, NumericError
from .models import forward_logits
from .tensor import Tensor


@dataclass(frozen=True)
class LikelihoodValue:
    value: float
    sample_id: object = None


def _as_batch(model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    shape = tuple(model.input_shape)
    if x.shape == shape:
        return x[None], True
    if x.shape[1:] == shape:
        return x, False
    raise DimensionError(f"input of shape {x.shape} does not match model input {shape}")


def _input_dtype(model):
    return np.result_type(model.dtype, T.get_dtype())


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-softmax of the true class, via logsumexp."""
    labels = np.asarray(labels, dtype=np.intp)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    picked = logits[np.arange(b), labels]
    losses = T.logsumexp(logits, axis=1) - picked
    if reduction == "sum":
        return losses.sum()
    if reduction == "none":
        return losses
    return losses.mean()


def log_likelihoods(model, x) -> np.ndarray:
    """Unnormalized log p(x) for each sample of a batch."""
    batch, _ = _as_batch(model, x)
    with T.no_grad():
        z = forward_logits(model, Tensor(batch, dtype=_input_dtype(model)))
        return T.logsumexp(z, axis=1).data


def log_likelihood(model, x, sample_id=None) -> LikelihoodValue:
    """logsumexp of the logits of one sample (log Z omitted)."""
    batch, single = _as_batch(model, x)
    if not single:
        raise DimensionError("log_likelihood takes one sample; use log_likelihoods for batches")
    return LikelihoodValue(float(log_likelihoods(model, batch)[0]), sample_id)


def relative_log_likelihood(model, x_prime, x) -> float:
    """log p(x') - log p(x); the partition function cancels."""
    return log_likelihood(model, x_prime).value - log_likelihood(model, x).value


def input_jacobian(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Row-by-row logit Jacobian and class probabilities.

    Returns ``(J, p)`` with ``J`` shaped (B, K, *input_shape) from K backward
    passes and ``p`` shaped (B, K).
    """
    batch, _ = _as_batch(model, x)
    xt = Tensor(batch, requires_grad=True, dtype=_input_dtype(model))
    z = forward_logits(model, xt)
    k = z.shape[1]
    rows = []
    for c in range(k):
        onehot = np.zeros(z.shape, dtype=z.dtype)
        onehot[:, c] = 1.0
        rows.append(T.grad(z, xt, grad_outputs=Tensor(onehot, dtype=z.dtype))[0].data)
    with T.no_grad():
        p = T.softmax(z.detach(), axis=1).data
    return np.stack(rows, axis=1), p


def likelihood_gradient(model, x, method: str = "autodiff") -> np.ndarray:
    """d log p(x) / dx, the probability-weighted sum of logit gradients.

    ``method="autodiff"`` differentiates logsumexp of the logits directly;
    ``method="weighted"`` builds every Jacobian row and sums them with the
    softmax weights. Both give the same quantity.
    """
    batch, single = _as_batch(model, x)
    if method == "autodiff":
        xt = Tensor(batch, requires_grad=True, dtype=_input_dtype(model))
        lse = T.logsumexp(forward_logits(model, xt), axis=1).sum()
        g = T.grad(lse, xt)[0].data
    elif method == "weighted":
        jac, p = input_jacobian(model, batch)
        g = np.einsum("bk,bk...->b...", p, jac)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(g)):
        raise NumericError("likelihood gradient is not finite")
    return g[0] if single else g


def ams_score(model, x) -> float | np.ndarray:
    """Approximate mass score: minus the Frobenius norm of the likelihood gradient."""
    batch, single = _as_batch(model, x)
    g = likelihood_gradient(model, batch)
    s = -np.sqrt(np.sum(g.reshape(len(g), -1) ** 2, axis=1))
    return float(s[0]) if single else s
