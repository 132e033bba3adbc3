"""Decoupled-weight-decay adaptive-moment optimizer.

Updates are lazy: a parameter whose grad is None this step is left completely
untouched (no moment update, no decay), so disabling an objective leaves all
parameters unreachable from the remaining losses bitwise identical. Per-param
step counts make bias correction consistent under such partial updates.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

# no decay for biases, normalization gains, codebooks, or the temperature
NO_DECAY_SUFFIXES = ("bias", "gain", "log_tau", "entries")


def _decayed(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


class AdamW:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, weight_decay: float = 0.05, grad_clip=None):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.state: dict[str, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _clip(self) -> None:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = float(np.sqrt(total))
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            # out-of-place: grad arrays may be borrowed from other nodes
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale

    def step(self, lr: float) -> None:
        if self.grad_clip is not None:
            self._clip()
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data),
                                         "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * (g * g)
            mhat = st["m"] / (1.0 - self.beta1 ** st["t"])
            vhat = st["v"] / (1.0 - self.beta2 ** st["t"])
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and _decayed(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
