"""Noise predictors: a toy attention denoiser and an analytic oracle."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any, Optional, Protocol

import numpy as np
import torch
from torch import nn

from ..errors import ParameterError
from ..imageops import box_resize
from .attention import LoraAdapter, attention, decoupled_cross_attention, lora_forward

D_CTX = 32
TEXT_TOKENS = 8
STYLE_GRID = 4
STYLE_PATCH = 4
LORA_TARGETS = ("q", "k", "v", "out")


@dataclass
class ConditioningContext:
    """Conditioning for one prediction.

    ``e_y`` None means the empty text condition. The styled branch carries
    ``e_I`` and never ``e_c``; the LoRA branch carries ``e_c`` and never ``e_I``.
    ``camera_id`` is only read by the oracle denoiser.
    """

    e_y: Any = None
    e_I: Any = None
    e_c: Any = None
    lambda_scale: float = 1.0
    camera_id: Optional[str] = None

    def validate(self):
        if self.e_I is not None and self.e_c is not None:
            raise ParameterError("a context cannot carry both a style embedding and a camera embedding")
        if self.lambda_scale < 0:
            raise ParameterError("lambda_scale must be >= 0")
        return self

    @property
    def styled(self):
        return self.e_I is not None

    @property
    def has_camera(self):
        return self.e_c is not None


class Denoiser(Protocol):
    def predict(self, z_t: np.ndarray, t: int, ctx: ConditioningContext) -> np.ndarray:
        ...


def encode_text(prompt, n_tokens=TEXT_TOKENS, d_ctx=D_CTX):
    """Deterministic stand-in text encoder: prompt-hash-seeded random tokens."""
    if prompt is None:
        return None
    seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_tokens, d_ctx)) / math.sqrt(d_ctx)


def style_patches(image):
    """Box-resize to a 4x4 grid of 4x4-pixel cells, one flattened cell per token."""
    size = STYLE_GRID * STYLE_PATCH
    small = box_resize(np.asarray(image, dtype=np.float64), size, size)
    cells = small.reshape(STYLE_GRID, STYLE_PATCH, STYLE_GRID, STYLE_PATCH, 3).transpose(0, 2, 1, 3, 4)
    return cells.reshape(STYLE_GRID * STYLE_GRID, STYLE_PATCH * STYLE_PATCH * 3)


def sinusoidal(positions, dim):
    positions = torch.as_tensor(positions, dtype=torch.float64).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    angles = positions * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def _tensor(x):
    if x is None or isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


class CrossAttentionBlock(nn.Module):
    def __init__(self, d_model, d_ctx):
        super().__init__()
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_ctx, d_model, bias=False)
        self.to_v = nn.Linear(d_ctx, d_model, bias=False)
        self.to_out = nn.Linear(d_model, d_model, bias=False)
        # separate key/value projections for the image branch
        self.to_k_ip = nn.Linear(d_ctx, d_model, bias=False)
        self.to_v_ip = nn.Linear(d_ctx, d_model, bias=False)

    def _proj(self, name, x, lora):
        layer = getattr(self, "to_" + name)
        if lora is None:
            return layer(x)
        return lora_forward(layer.weight, lora[name], x)

    def forward(self, h, context, image_tokens=None, lambda_scale=1.0, lora=None):
        q = self._proj("q", h, lora)
        if context is None:
            text_k = text_v = q.new_zeros((1, q.shape[-1]))
        else:
            text_k, text_v = self._proj("k", context, lora), self._proj("v", context, lora)
        image_k = image_v = None
        if image_tokens is not None:
            image_k, image_v = self.to_k_ip(image_tokens), self.to_v_ip(image_tokens)
        mixed = decoupled_cross_attention(q, text_k, text_v, image_k, image_v, lambda_scale)
        return self._proj("out", mixed, lora)


class ToyDenoiser(nn.Module):
    """Patch-token encoder/decoder with self-attention and decoupled cross-attention.

    LoRA adapters wrap the cross-attention q/k/v/out projections and are
    active whenever the context carries a camera token, which is appended to
    the text context. Base weights are never updated by the pipeline.
    """

    def __init__(self, patch=8, d_model=32, d_ctx=D_CTX, n_cross_blocks=1, lora_rank=4, seed=0):
        super().__init__()
        self.patch = patch
        self.d_model = d_model
        self.d_ctx = d_ctx
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            d_patch = 3 * patch * patch
            self.patch_in = nn.Linear(d_patch, d_model)
            self.time_proj = nn.Linear(d_model, d_model)
            self.sa_qkv = nn.Linear(d_model, 3 * d_model, bias=False)
            self.sa_out = nn.Linear(d_model, d_model, bias=False)
            self.cross = nn.ModuleList([CrossAttentionBlock(d_model, d_ctx) for _ in range(n_cross_blocks)])
            self.mlp_in = nn.Linear(d_model, 2 * d_model)
            self.mlp_out = nn.Linear(2 * d_model, d_model)
            self.patch_out = nn.Linear(d_model, d_patch)
            self.image_proj = nn.Linear(STYLE_PATCH * STYLE_PATCH * 3, d_ctx)
            self.camera_proj = nn.Linear(12, d_ctx)
            with torch.no_grad():
                self.camera_proj.weight.mul_(0.1)
                self.camera_proj.bias.zero_()
        self.to(torch.float64)
        self.lora = nn.ModuleList(
            [nn.ModuleDict({name: self._make_adapter(name, lora_rank, gen) for name in LORA_TARGETS})
             for _ in range(n_cross_blocks)]
        )
        self.lora_rank = lora_rank
        for p in self.base_parameters():
            p.requires_grad_(False)

    def _make_adapter(self, name, rank, gen):
        d_in = self.d_model if name in ("q", "out") else self.d_ctx
        return LoraAdapter(d_in, self.d_model, rank, generator=gen)

    def base_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("lora.") and not n.startswith("camera_proj.")]

    def lora_parameters(self):
        return dict((n, p) for n, p in self.named_parameters() if n.startswith("lora."))

    def trainable_parameters(self):
        """LoRA factors plus the camera projection layer (the L_psi parameters)."""
        return dict((n, p) for n, p in self.named_parameters()
                    if n.startswith("lora.") or n.startswith("camera_proj."))

    def reset_lora(self, seed=0):
        gen = torch.Generator().manual_seed(seed)
        for block in self.lora:
            for name in LORA_TARGETS:
                block[name].reset(gen)

    def camera_token(self, flat_extrinsics):
        return self.camera_proj(_tensor(flat_extrinsics).reshape(12))

    def style_tokens(self, style_image):
        return self.image_proj(_tensor(style_patches(style_image)))

    def _patchify(self, z):
        h, w, _ = z.shape
        p = self.patch
        if h % p or w % p:
            raise ParameterError(f"image size {h}x{w} is not divisible by patch size {p}")
        return z.reshape(h // p, p, w // p, p, 3).permute(0, 2, 1, 3, 4).reshape(-1, 3 * p * p)

    def _unpatchify(self, tokens, h, w):
        p = self.patch
        return tokens.reshape(h // p, w // p, p, p, 3).permute(0, 2, 1, 3, 4).reshape(h, w, 3)

    def forward(self, z, t, ctx, use_lora=None):
        ctx.validate()
        z = _tensor(z)
        h, w, _ = z.shape
        tokens = self._patchify(z)
        n = tokens.shape[0]
        x = self.patch_in(tokens) + sinusoidal(torch.arange(n), self.d_model)
        x = x + self.time_proj(sinusoidal([float(t)], self.d_model))

        q, k, v = self.sa_qkv(x).chunk(3, dim=-1)
        x = x + self.sa_out(attention(q, k, v))

        e_y = _tensor(ctx.e_y)
        context = e_y
        if ctx.e_c is not None:
            e_c = _tensor(ctx.e_c).reshape(1, self.d_ctx)
            context = e_c if e_y is None else torch.cat([e_y, e_c], dim=0)
        if use_lora is None:
            use_lora = ctx.e_c is not None
        image_tokens = _tensor(ctx.e_I)
        for i, block in enumerate(self.cross):
            x = x + block(x, context, image_tokens, ctx.lambda_scale, self.lora[i] if use_lora else None)

        x = x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(x)))
        return self._unpatchify(self.patch_out(x), h, w)

    def predict(self, z_t, t, ctx, use_lora=None):
        with torch.no_grad():
            return self.forward(z_t, t, ctx, use_lora).numpy()


def oracle_denoiser_predict(targets, style_tile, blend, z_t, t, camera_id, schedule, blend_mask=None):
    """Noise estimate whose clean-image prediction is the blended target x*.

    x* = (1 - blend) * targets[camera_id] + blend * style_tile, and
    eps_hat = (z_t - sqrt(alpha_bar_t) x*) / sigma_t. An optional per-pixel
    ``blend_mask`` in [0, 1] scales the blend (all ones gives the plain form).
    """
    if camera_id not in targets:
        raise ParameterError(f"no target registered for camera {camera_id!r}")
    target = np.asarray(targets[camera_id], dtype=np.float64)
    if blend and style_tile is not None:
        weight = blend if blend_mask is None else blend * np.asarray(blend_mask, dtype=np.float64)[..., None]
        target = (1.0 - weight) * target + weight * np.asarray(style_tile, dtype=np.float64)
    z_t = np.asarray(z_t, dtype=np.float64)
    return (z_t - schedule.sqrt_alpha_bar(t) * target) / schedule.sigma(t)


class OracleDenoiser:
    """Analytic denoiser pulling renders toward per-view (optionally style-blended) targets.

    ``blend_masks`` optionally maps camera ids to per-pixel blend weights,
    e.g. the target's own alpha so that the style lands on the object only.
    """

    def __init__(self, schedule, targets=None, style_tile=None, blend=0.0):
        if not 0.0 <= blend <= 1.0:
            raise ParameterError("blend must lie in [0, 1]")
        self.schedule = schedule
        self.targets = dict(targets or {})
        self.blend_masks = {}
        self.style_tile = style_tile
        self.blend = float(blend)

    def register(self, camera_id, image, blend_mask=None):
        self.targets[camera_id] = np.asarray(image, dtype=np.float64)
        if blend_mask is not None:
            self.blend_masks[camera_id] = np.asarray(blend_mask, dtype=np.float64)

    def forget(self, camera_id):
        self.targets.pop(camera_id, None)
        self.blend_masks.pop(camera_id, None)

    def clean_target(self, camera_id):
        """The image x* this denoiser pulls renders of ``camera_id`` toward."""
        target = self.targets[camera_id]
        if not self.blend or self.style_tile is None:
            return target
        mask = self.blend_masks.get(camera_id)
        weight = self.blend if mask is None else self.blend * mask[..., None]
        return (1.0 - weight) * target + weight * self.style_tile

    def predict(self, z_t, t, ctx):
        return oracle_denoiser_predict(self.targets, self.style_tile, self.blend, z_t, t, ctx.camera_id,
                                       self.schedule, self.blend_masks.get(ctx.camera_id))
