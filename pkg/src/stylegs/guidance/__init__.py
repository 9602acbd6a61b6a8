from .attention import LoraAdapter, attention, decoupled_cross_attention, lora_forward
from .denoisers import (
    ConditioningContext,
    Denoiser,
    OracleDenoiser,
    ToyDenoiser,
    encode_text,
    oracle_denoiser_predict,
)
from .distill import guidance_difference, lora_loss, lora_loss_and_grads, sds_grad, vsd_grad, vssd_grad
from .schedule import DiffusionSchedule, make_schedule, perturb, sample_timestep
from .weights import load_weights, save_weights

__all__ = [
    "ConditioningContext",
    "Denoiser",
    "DiffusionSchedule",
    "LoraAdapter",
    "OracleDenoiser",
    "ToyDenoiser",
    "attention",
    "decoupled_cross_attention",
    "encode_text",
    "guidance_difference",
    "load_weights",
    "lora_forward",
    "lora_loss",
    "lora_loss_and_grads",
    "make_schedule",
    "oracle_denoiser_predict",
    "perturb",
    "sample_timestep",
    "save_weights",
    "sds_grad",
    "vsd_grad",
    "vssd_grad",
]
