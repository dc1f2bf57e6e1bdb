from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return float(loss), grad / b


def entropy(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean Shannon entropy of the softmax rows and its gradient."""
    b = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    grad = -p * (logp + ent[:, None]) / b
    return float(ent.mean()), grad
