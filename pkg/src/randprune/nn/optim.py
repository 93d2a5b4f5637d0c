import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


def sgd_step(params, lr, momentum=0.9, weight_decay=0.0):
    """SGD with heavy-ball momentum; zeroes gradients afterwards.

    m <- momentum * m + (grad + weight_decay * value); value <- value - lr * m.
    The step is aborted (nothing updated) if any gradient is non-finite.
    """
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteGradient("non-finite gradient; step aborted")
    for p in params:
        d = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.momentum_buffer *= momentum
        p.momentum_buffer += d
        p.value -= lr * p.momentum_buffer
        p.grad[...] = 0
    return params


def step_decay(base_lr, epoch, total_epochs, milestones=(0.5, 0.75), factor=0.1):
    """Learning rate with x``factor`` decay at fractional milestones of the schedule."""
    lr = base_lr
    for m in milestones:
        if epoch >= int(round(m * total_epochs)) and total_epochs > 1:
            lr *= factor
    return lr
