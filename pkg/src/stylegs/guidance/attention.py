"""Cross-attention with a decoupled image branch, and low-rank adapters."""

from __future__ import annotations

import math

import torch
from torch import nn

from ..errors import ParameterError


def attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the key axis."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ParameterError(f"attention shapes disagree: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def decoupled_cross_attention(q, k_y, v_y, k_i=None, v_i=None, lambda_scale=1.0):
    """Text cross-attention plus a ``lambda_scale``-weighted image branch."""
    out = attention(q, k_y, v_y)
    if k_i is None:
        return out
    image = attention(q, k_i, v_i)
    if image.shape != out.shape:
        raise ParameterError("text and image branches produce different value widths")
    return out + lambda_scale * image


class LoraAdapter(nn.Module):
    """Low-rank update (alpha / rank) * B @ A for a d_out x d_in weight."""

    def __init__(self, d_in, d_out, rank=4, alpha=None, generator=None, dtype=torch.float64):
        super().__init__()
        if rank < 1:
            raise ParameterError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        bound = 1.0 / math.sqrt(d_in)
        a = (torch.rand(rank, d_in, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    @property
    def scale(self):
        return self.alpha / self.rank

    def delta(self):
        return self.scale * self.B @ self.A

    def reset(self, generator=None):
        fresh = LoraAdapter(self.A.shape[1], self.B.shape[0], self.rank, self.alpha, generator, self.A.dtype)
        with torch.no_grad():
            self.A.copy_(fresh.A)
            self.B.zero_()


def lora_forward(base_weight, adapter, x, bias=None):
    """x W^T + (alpha/r) (x A^T) B^T (+ bias), i.e. W x + (alpha/r) B A x per token."""
    if adapter.A.shape[0] != adapter.B.shape[1] or adapter.A.shape[0] != adapter.rank:
        raise ParameterError("LoRA factors have inconsistent rank")
    if adapter.A.shape[1] != base_weight.shape[1] or adapter.B.shape[0] != base_weight.shape[0]:
        raise ParameterError("LoRA factors do not match the base weight shape")
    out = x @ base_weight.T + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)
    if bias is not None:
        out = out + bias
    return out
