"""Score-distillation image gradients and the LoRA-branch diffusion loss.

All three guidance forms are the weighted difference of two noise
predictions at the same perturbed render; they differ only in which
predictors and contexts feed the difference.
"""

from __future__ import annotations

import numpy as np
import torch

from ..errors import ParameterError
from .denoisers import ConditioningContext, encode_text
from .schedule import perturb


def guidance_difference(pred_a, pred_b, t, schedule):
    """omega(t) * (pred_a - pred_b)."""
    pred_a = np.asarray(pred_a, dtype=np.float64)
    pred_b = np.asarray(pred_b, dtype=np.float64)
    if pred_a.shape != pred_b.shape:
        raise ParameterError(f"prediction shapes differ: {pred_a.shape} vs {pred_b.shape}")
    return schedule.weight(t) * (pred_a - pred_b)


def _checked_predict(denoiser, z_t, t, ctx):
    pred = np.asarray(denoiser.predict(z_t, t, ctx), dtype=np.float64)
    if pred.shape != z_t.shape:
        raise ParameterError(f"denoiser returned shape {pred.shape} for input {z_t.shape}")
    return pred


def sds_grad(x, t, eps, denoiser, ctx, schedule):
    z_t = perturb(x, t, eps, schedule)
    ctx.validate()
    return guidance_difference(_checked_predict(denoiser, z_t, t, ctx), eps, t, schedule)


def vsd_grad(x, t, eps, base_denoiser, ctx_y, lora_denoiser, ctx_c, schedule):
    """omega(t) * (eps_phi(z_t; y, t) - eps_psi(z_t; y, t, c))."""
    for ctx in (ctx_y, ctx_c):
        ctx.validate()
        if ctx.styled:
            raise ParameterError("the plain variational gradient takes no style embedding")
    z_t = perturb(x, t, eps, schedule)
    return guidance_difference(
        _checked_predict(base_denoiser, z_t, t, ctx_y), _checked_predict(lora_denoiser, z_t, t, ctx_c), t, schedule
    )


def vssd_grad(x, t, eps, styled_denoiser, ctx_s, lora_denoiser, ctx_c, schedule):
    """omega(t) * (eps_phi(z_t; y, t, s) - eps_psi(z_t; y, t, c))."""
    ctx_s.validate()
    ctx_c.validate()
    if not ctx_s.styled:
        raise ParameterError("the styled branch needs a style embedding")
    if not ctx_c.has_camera:
        raise ParameterError("the LoRA branch needs a camera embedding")
    z_t = perturb(x, t, eps, schedule)
    return guidance_difference(
        _checked_predict(styled_denoiser, z_t, t, ctx_s), _checked_predict(lora_denoiser, z_t, t, ctx_c), t, schedule
    )


def lora_loss(denoiser, z_t, t, flat_extrinsics, eps, text=None):
    """Differentiable mean-squared noise residual of the camera-conditioned branch."""
    if text is not None:
        raise ParameterError("the LoRA diffusion loss uses the empty text condition")
    # the empty condition is the encoding of the empty prompt, as for unconditional guidance
    e_c = denoiser.camera_token(flat_extrinsics)
    pred = denoiser(z_t, t, ConditioningContext(e_y=encode_text(""), e_c=e_c), use_lora=True)
    eps = torch.as_tensor(np.asarray(eps), dtype=torch.float64)
    return torch.mean((pred - eps) ** 2)


def lora_loss_and_grads(denoiser, z_t, t, flat_extrinsics, eps, text=None, include_base=False):
    """Loss value and gradients for the LoRA factors and camera projection layer.

    With ``include_base`` the frozen base weights are differentiated too
    (verification only; the pipeline never updates them).
    """
    params = dict(denoiser.trainable_parameters())
    base = {}
    if include_base:
        base = {n: p for n, p in denoiser.named_parameters() if n not in params}
        for p in base.values():
            p.requires_grad_(True)
    try:
        targets = {**params, **base}
        loss = lora_loss(denoiser, z_t, t, flat_extrinsics, eps, text)
        grads = torch.autograd.grad(loss, list(targets.values()), allow_unused=True)
    finally:
        for p in base.values():
            p.requires_grad_(False)
    out = {}
    for (name, p), g in zip(targets.items(), grads):
        out[name] = np.zeros(tuple(p.shape)) if g is None else g.numpy().copy()
    return float(loss.detach()), out
