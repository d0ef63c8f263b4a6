"""Adam with the AMSGrad running maximum, and a reduce-on-plateau LR schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AdamAMSGrad:
    """Adam whose denominator uses the running max of the bias-corrected second moment."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.v_hat_max = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr: float) -> None:
        """Update ``params`` in place."""
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, g, m, v, vmax in zip(params, grads, self.m, self.v, self.v_hat_max):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            np.maximum(vmax, v / bc2, out=vmax)
            p -= lr * (m / bc1) / (np.sqrt(vmax) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v + self.v_hat_max

    def load_state_arrays(self, arrays, step_count: int) -> None:
        n = len(self.m)
        self.m = [a.copy() for a in arrays[:n]]
        self.v = [a.copy() for a in arrays[n:2 * n]]
        self.v_hat_max = [a.copy() for a in arrays[2 * n:3 * n]]
        self.step_count = int(step_count)


@dataclass
class PlateauScheduler:
    """Halve the LR once the monitored loss has not improved for ``patience`` epochs.

    Improvement means ``loss < best * (1 - rel_threshold)``.
    """

    lr: float
    factor: float = 0.5
    patience: int = 5
    rel_threshold: float = 1e-4
    min_lr: float = 1e-8
    best: float = field(default=float("inf"))
    bad_epochs: int = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best * (1.0 - self.rel_threshold):
            self.best = float(epoch_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.bad_epochs = int(state["bad_epochs"])
