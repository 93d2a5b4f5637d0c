"""Supervised training and top-k evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nn import Network, NonFiniteGradient, loss_cross_entropy, sgd_step, step_decay
from .utils import stream_rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (0.5, 0.75)
    seed: int = 0
    flip: bool = False

    def lr_at(self, epoch):
        return step_decay(self.lr, epoch, self.epochs, self.milestones)

    @property
    def final_lr(self):
        return self.lr_at(max(self.epochs - 1, 0))


def batch_order(seed, epoch, n, stream="data-order"):
    return stream_rng(seed, stream, epoch).permutation(n)


def augment(xb, rng):
    flip = rng.random(len(xb)) < 0.5
    xb = xb.copy()
    xb[flip] = xb[flip, ..., ::-1]
    return xb


def train_epochs(net: Network, x, y, tc: TrainConfig, stream="data-order", on_epoch=None):
    """Plain minibatch SGD; returns per-epoch mean losses.

    Non-finite gradients skip the step (logged and counted) rather than abort.
    """
    history = []
    skipped = 0
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        order = batch_order(tc.seed, epoch, len(x), stream)
        aug_rng = stream_rng(tc.seed, stream + "-augment", epoch)
        losses = []
        for i in range(0, len(x), tc.batch_size):
            idx = order[i:i + tc.batch_size]
            xb = augment(x[idx], aug_rng) if tc.flip else x[idx]
            logits = net.forward(xb, training=True)
            loss, grad = loss_cross_entropy(logits, y[idx])
            net.backward(grad)
            try:
                sgd_step(net.parameters(), lr, tc.momentum, tc.weight_decay)
            except NonFiniteGradient:
                net.zero_grad()
                skipped += 1
                continue
            losses.append(loss)
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("epoch %d lr %.4g loss %.4f", epoch, lr, history[-1])
        if on_epoch:
            on_epoch(epoch, history[-1])
    if skipped:
        log.warning("%d steps skipped on non-finite gradients", skipped)
    return history


def topk_accuracy(logits, labels, ks=(1, 5)):
    order = np.argsort(-logits, axis=1, kind="stable")
    out = []
    for k in ks:
        k = min(k, logits.shape[1])
        out.append(float((order[:, :k] == labels[:, None]).any(axis=1).mean()))
    return tuple(out)


def evaluate(net: Network, x, y, batch_size=256):
    """(top-1, top-5) accuracy as fractions."""
    return topk_accuracy(net.predict(x, batch_size), np.asarray(y))
