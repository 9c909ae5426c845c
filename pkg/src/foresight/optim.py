"""Parameter updates and learning-rate scheduling for network training."""

import numpy as np

from .errors import ConfigurationError


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Weight decay is applied directly to the parameters, scaled by the
    learning rate, independent of the gradient moments; parameters whose
    grad is None are left untouched, including by the decay term.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ConfigurationError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ConfigurationError(f"weight decay must be >= 0, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def one_cycle_lr(step, total_steps, max_lr):
    """Cosine one-cycle schedule evaluated at an integer step.

    Ramps from max_lr/25 up to max_lr over the first 30% of steps, then
    anneals to max_lr/1e4 by the final step. Both phases use half-cosine
    interpolation; endpoints are exact.
    """
    if total_steps < 2:
        raise ConfigurationError(f"one_cycle_lr needs total_steps >= 2, got {total_steps}")
    if not 0 <= step < total_steps:
        raise ConfigurationError(
            f"step {step} outside schedule of {total_steps} steps"
        )
    peak = int(round(0.3 * total_steps))
    peak = min(max(peak, 1), total_steps - 1)
    start_lr = max_lr / 25.0
    final_lr = max_lr / 1e4
    # endpoints are part of the contract, so return them outside the blend
    if step == 0:
        return start_lr
    if step == peak:
        return max_lr
    if step == total_steps - 1:
        return final_lr
    if step < peak:
        blend = 0.5 * (1.0 - np.cos(np.pi * step / peak))
        return start_lr + (max_lr - start_lr) * blend
    blend = 0.5 * (1.0 - np.cos(np.pi * (step - peak) / (total_steps - 1 - peak)))
    return max_lr + (final_lr - max_lr) * blend
