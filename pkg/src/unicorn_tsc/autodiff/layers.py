"""Layers built on the autodiff tensor: linear, two-layer MLP, GRU cell, attention."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import AutodiffError, Tensor


class Module:
    """Container whose Tensor / Module attributes form a named parameter tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise AutodiffError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise AutodiffError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = _uniform(rng, (d_in, d_out), d_in)
        self.b = _uniform(rng, (d_out,), d_in) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor, rows=None, cols=None) -> Tensor:
        """x @ W + b; ``rows``/``cols`` restrict W to a sub-block (inputs/outputs)."""
        W = self.W
        b = self.b
        if rows is not None:
            W = W[rows]
        if cols is not None:
            W = W[:, cols]
            b = b[cols] if b is not None else None
        if x.shape[-1] != W.shape[0]:
            raise AutodiffError(f"Linear: input width {x.shape[-1]} != {W.shape[0]}")
        y = x @ W
        return y + b if b is not None else y


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor, rows=None, cols=None) -> Tensor:
        return self.fc2(T.relu(self.fc1(x, rows=rows)), cols=cols)


class GRUCell(Module):
    """h' = (1 - z) * h + z * tanh(x W_n + (r * h) U_n + b_n)."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.W_z = _uniform(rng, (d_in, d), d)
        self.W_r = _uniform(rng, (d_in, d), d)
        self.W_n = _uniform(rng, (d_in, d), d)
        self.U_z = _uniform(rng, (d, d), d)
        self.U_r = _uniform(rng, (d, d), d)
        self.U_n = _uniform(rng, (d, d), d)
        self.b_z = _uniform(rng, (d,), d)
        self.b_r = _uniform(rng, (d,), d)
        self.b_n = _uniform(rng, (d,), d)
        self.d_in, self.d = d_in, d

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d:
            raise AutodiffError(
                f"GRUCell: got x {x.shape}, h {h.shape}; expected widths {self.d_in}, {self.d}"
            )
        z = T.sigmoid(x @ self.W_z + h @ self.U_z + self.b_z)
        r = T.sigmoid(x @ self.W_r + h @ self.U_r + self.b_r)
        n = T.tanh(x @ self.W_n + (r * h) @ self.U_n + self.b_n)
        return (1.0 - z) * h + z * n


def gru_cell(params: GRUCell, x: Tensor, h_prev: Tensor) -> Tensor:
    return params(x, h_prev)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    return T.masked_softmax(logits, mask)


class CrossAttention(Module):
    """Multi-head attention: queries from one source, keys/values from another.

    Scores are scaled by 1/sqrt(d_model / heads). Masked keys are excluded.
    """

    def __init__(self, d_query: int, d_kv: int, d_model: int, heads: int,
                 rng: np.random.Generator):
        if d_model % heads:
            raise AutodiffError(f"d_model {d_model} not divisible by heads {heads}")
        self.W_Q = _uniform(rng, (d_query, d_model), d_query)
        self.W_K = _uniform(rng, (d_kv, d_model), d_kv)
        self.W_V = _uniform(rng, (d_kv, d_model), d_kv)
        self.W_O = _uniform(rng, (d_model, d_model), d_model)
        self.heads = heads
        self.d_model = d_model

    def _split(self, x: Tensor) -> Tensor:
        # (..., n, d_model) -> (..., heads, n, d_head)
        *lead, n, _ = x.shape
        x = x.reshape(*lead, n, self.heads, self.d_model // self.heads)
        return T.swapaxes(x, -2, -3)

    def __call__(self, query_src: Tensor, kv_src: Tensor, kv_mask=None) -> Tensor:
        if query_src.shape[-1] != self.W_Q.shape[0] or kv_src.shape[-1] != self.W_K.shape[0]:
            raise AutodiffError(
                f"CrossAttention: query width {query_src.shape[-1]}, kv width {kv_src.shape[-1]}"
            )
        n_k = kv_src.shape[-2]
        if kv_mask is None:
            kv_mask = np.ones(kv_src.shape[:-1])
        kv_mask = np.asarray(kv_mask, dtype=bool)
        if kv_mask.shape[-1] != n_k:
            raise AutodiffError(f"key mask length {kv_mask.shape[-1]} != number of keys {n_k}")
        if not kv_mask.any(axis=-1).all():
            raise AutodiffError("cross attention: every key is masked")
        d_head = self.d_model // self.heads
        Q = self._split(query_src @ self.W_Q)
        K = self._split(kv_src @ self.W_K)
        V = self._split(kv_src @ self.W_V)
        scores = (Q @ T.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d_head))
        # mask (..., n_k) -> (..., 1, 1, n_k)
        mask = kv_mask[..., None, None, :]
        att = T.masked_softmax(scores, mask)
        out = att @ V  # (..., heads, n_q, d_head)
        out = T.swapaxes(out, -2, -3)
        *lead, n_q, _, _ = out.shape
        out = out.reshape(*lead, n_q, self.d_model)
        return out @ self.W_O


def cross_attention(params: CrossAttention, query_src: Tensor, kv_src: Tensor,
                    kv_mask=None) -> Tensor:
    return params(query_src, kv_src, kv_mask)
