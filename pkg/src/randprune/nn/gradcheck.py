import numpy as np

from .losses import loss_cross_entropy


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradient_check(model, batch, n_entries=60, eps=1e-5, seed=0, training=True):
    """Largest relative error between backprop and central differences.

    Compares the cross-entropy gradient at ``n_entries`` randomly chosen
    parameter entries (spread over all parameter tensors).  The model should be
    in 64-bit mode; with 32-bit parameters the result is dominated by rounding.
    """
    x, y = batch
    rng = np.random.default_rng(seed)

    def loss_at():
        return loss_cross_entropy(model.forward(x, training=training), y)[0]

    model.zero_grad()
    _, g = loss_cross_entropy(model.forward(x, training=training), y)
    model.backward(g)
    params = model.parameters()
    analytic = [p.grad.copy() for p in params]
    model.zero_grad()

    worst = 0.0
    for _ in range(n_entries):
        k = int(rng.integers(len(params)))
        p = params[k]
        flat = p.value.reshape(-1)
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        up = loss_at()
        flat[i] = old - eps
        down = loss_at()
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[k].reshape(-1)[i]), numeric))
    return worst
