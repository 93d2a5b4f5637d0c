import numpy as np


def softmax(logits, temperature=1.0):
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class and its logit gradient."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return float(loss), grad / n


def loss_kl(p, q):
    """Mean over rows of sum_k p_k ln(p_k / q_k), with q floored at 1e-12."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("probabilities must be nonnegative")
    for name, d in (("p", p), ("q", q)):
        if np.abs(d.sum(axis=1) - 1).max() > 1e-6:
            raise ValueError(f"rows of {name} must sum to 1 within 1e-6")
    return float(kl_rows(p, q).mean())


def kl_rows(p, q):
    """Per-row KL divergence without validation (hot path for scoring)."""
    q = np.maximum(q, 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def loss_distill(logits, target_probs, temperature=1.0):
    """KL(target || softmax(logits / T)) averaged over the batch.

    ``target_probs`` are constants.  Returns the loss and its gradient with
    respect to ``logits``.
    """
    n = logits.shape[0]
    logq = log_softmax(logits, temperature)
    p = target_probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.maximum(p, 1e-300)) - logq), 0.0)
    loss = terms.sum(axis=1).mean()
    grad = (np.exp(logq) - p) / (temperature * n)
    return float(loss), grad.astype(logits.dtype, copy=False)
