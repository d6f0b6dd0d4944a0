"""Adam with per-group learning rates."""

from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, groups: Sequence[dict], betas=(0.9, 0.999), eps: float = 1e-8):
        """``groups``: dicts with ``params`` (list of Tensors) and ``lr``."""
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def all_params(self) -> List[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = float(np.sqrt(sum(float((p.grad ** 2).sum())
                                  for p in self.all_params() if p.grad is not None)))
        if max_norm and total > max_norm:
            scale = max_norm / (total + 1e-12)
            for p in self.all_params():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return total

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                k = id(p)
                m = self.m.get(k)
                if m is None:
                    m = self.m[k] = np.zeros_like(p.data)
                    self.v[k] = np.zeros_like(p.data)
                v = self.v[k]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
