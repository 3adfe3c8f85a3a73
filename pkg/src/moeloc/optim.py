"""Gradient optimizer and learning-rate schedule for all training stages."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Adam with decoupled weight decay over autodiff parameters.

    Parameters whose ``grad`` is None at step time are skipped entirely
    (no decay either), so frozen submodules can stay in the list.
    """

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.data -= self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


class OneCycleSchedule:
    """Triangular one-cycle schedule: floor to peak and back to floor."""

    def __init__(self, min_lr, max_lr, total_steps):
        if total_steps < 1:
            raise ValueError("need at least one step")
        if not 0 < min_lr <= max_lr:
            raise ValueError("need 0 < min_lr <= max_lr")
        self.min_lr = min_lr
        self.max_lr = max_lr
        self.total_steps = total_steps

    def lr_at(self, step):
        """Learning rate for 0-indexed ``step``; clamps beyond the end."""
        if self.total_steps == 1:
            return self.max_lr
        frac = np.clip(step / (self.total_steps - 1), 0.0, 1.0)
        rise = 1.0 - abs(2.0 * frac - 1.0)
        return self.min_lr + (self.max_lr - self.min_lr) * rise


def linear_anneal(start, end, step, total_steps):
    """Linear interpolation from start to end across a stage."""
    if total_steps <= 1:
        return end
    frac = np.clip(step / (total_steps - 1), 0.0, 1.0)
    return start + (end - start) * frac
