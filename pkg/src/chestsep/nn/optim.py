"""AdamW with the AMSGrad extension, global-norm gradient clipping, and a
reduce-on-plateau learning-rate schedule.

Weight decay is decoupled: parameters shrink by lr * wd before the adaptive
step, so decay never leaks into the moment estimates.
"""

import math

import numpy as np

from ..errors import NonFiniteError


class AdamWAmsgrad:
    """Decoupled-weight-decay Adam keeping a running elementwise max of the
    second moment; the max (bias-corrected) feeds the denominator."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.1):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.v_max = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            np.maximum(self.v_max[i], self.v[i], out=self.v_max[i])
            denom = np.sqrt(self.v_max[i] / bc2) + self.eps
            p.data -= (self.lr / bc1) * self.m[i] / denom

    # -- persistence (resume support) --------------------------------------
    def state_tensors(self):
        """Optimizer state as named float arrays, keyed for checkpoint storage."""
        out = {}
        for i, p in enumerate(self.params):
            key = p.name or f"param{i}"
            out[f"optim/m/{key}"] = self.m[i]
            out[f"optim/v/{key}"] = self.v[i]
            out[f"optim/vmax/{key}"] = self.v_max[i]
        return out

    def load_state_tensors(self, tensors):
        for i, p in enumerate(self.params):
            key = p.name or f"param{i}"
            self.m[i] = np.array(tensors[f"optim/m/{key}"], dtype=p.data.dtype)
            self.v[i] = np.array(tensors[f"optim/v/{key}"], dtype=p.data.dtype)
            self.v_max[i] = np.array(tensors[f"optim/vmax/{key}"], dtype=p.data.dtype)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_grad_l2(params, max_norm: float = 5.0) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm; direction is preserved exactly.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class PlateauScheduler:
    """Halve the learning rate after `patience` epochs without improvement.

    One cooldown epoch follows each reduction before the stall counter starts
    again, so a flat validation curve halves the rate every patience+1 epochs.
    """

    def __init__(self, optimizer, factor=0.5, patience=4, cooldown=1):
        if not (0.0 < factor < 1.0):
            raise ValueError(f"factor must be in (0, 1), got {factor}")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.cooldown = cooldown
        self.best_metric = math.inf
        self.epochs_since_improvement = 0
        self._cooldown_left = 0

    @property
    def current_lr(self) -> float:
        return self.optimizer.lr

    def step(self, validation_metric: float) -> float:
        """Record an epoch's validation metric (lower is better); returns the lr."""
        if validation_metric < self.best_metric:
            self.best_metric = validation_metric
            self.epochs_since_improvement = 0
        elif self._cooldown_left > 0:
            self._cooldown_left -= 1
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.optimizer.lr *= self.factor
                self.epochs_since_improvement = 0
                self._cooldown_left = self.cooldown
        return self.optimizer.lr

    def state_dict(self):
        return {
            "lr": self.optimizer.lr,
            "best_metric": self.best_metric,
            "epochs_since_improvement": self.epochs_since_improvement,
            "cooldown_left": self._cooldown_left,
        }

    def load_state_dict(self, state):
        self.optimizer.lr = float(state["lr"])
        self.best_metric = float(state["best_metric"])
        self.epochs_since_improvement = int(state["epochs_since_improvement"])
        self._cooldown_left = int(state["cooldown_left"])
