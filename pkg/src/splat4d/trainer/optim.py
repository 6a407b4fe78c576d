"""Adam over named arrays with per-group learning rates and exponential decay."""
from __future__ import annotations

from typing import Callable

import numpy as np


class Adam:
    """In-place Adam on a dict of arrays.

    Each parameter belongs to a group (via ``group_of``); the group's rate
    decays as ``lr * final_ratio ** (step / decay_steps)``. Groups with a
    zero rate are never touched.
    """

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 group_of: Callable[[str], str], decay_steps: int, final_ratio: float = 0.1,
                 betas=(0.9, 0.999), eps: float = 1e-15):
        self.params = params
        self.lrs = dict(lrs)
        self.group_of = group_of
        self.decay_steps = max(int(decay_steps), 1)
        self.final_ratio = final_ratio
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr(self, group: str, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        frac = min(step / self.decay_steps, 1.0)
        return self.lrs.get(group, 0.0) * self.final_ratio ** frac

    def step(self, grads: dict[str, np.ndarray]) -> None:
        t = self.step_count + 1
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for name, p in self.params.items():
            lr = self.lr(self.group_of(name))
            g = grads.get(name)
            if lr == 0.0 or g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
        self.step_count = t

    def rebind(self, params: dict[str, np.ndarray], keep: dict[str, np.ndarray] | None = None) -> None:
        """Point at new parameter arrays (e.g. after densification).

        ``keep`` maps a parameter name to an index array selecting, for each
        new row, the old row whose moments carry over (-1 starts fresh).
        """
        keep = keep or {}
        for name, p in params.items():
            if name in keep:
                idx = keep[name]
                for store in (self.m, self.v):
                    old = store[name]
                    new = np.zeros_like(p)
                    valid = idx >= 0
                    new[valid] = old[idx[valid]]
                    store[name] = new
            elif name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
        self.params = params
