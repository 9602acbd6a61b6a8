"""Two-stage driver: object generation, then style distillation."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import fixed_ring_cameras, flatten_extrinsics, random_orbit_camera
from .config import RunConfig
from .errors import DivergenceError, ParameterError
from .gaussians import GaussianCloud, PARAM_GROUPS, init_cloud
from .guidance import (
    ConditioningContext,
    OracleDenoiser,
    ToyDenoiser,
    encode_text,
    lora_loss_and_grads,
    make_schedule,
    perturb,
    sample_timestep,
    save_weights,
    sds_grad,
    vsd_grad,
    vssd_grad,
)
from .imageops import box_resize, write_png
from .optim import AdamState, adam_step, cloud_adam_step
from .ply import save_ply
from .rasterizer import radius_stats, render, render_backward
from .regularizer import surface_loss, surface_loss_grad

log = logging.getLogger(__name__)

WHITE = (1.0, 1.0, 1.0)
TELEMETRY_FIELDS = (
    "stage", "step", "camera", "t", "guidance_grad_norm", "surface_loss", "log_mean_area", "area_p95",
    "lora_loss", "radius_p95",
)


@dataclass
class StageResult:
    cloud: GaussianCloud
    denoiser: ToyDenoiser
    telemetry: list = field(default_factory=list)


def base_checksum(denoiser):
    h = hashlib.sha256()
    for p in denoiser.base_parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def ring_cameras(config):
    return fixed_ring_cameras(
        4, config.camera_radius, math.radians(config.camera_elevation_deg), math.radians(config.fov_deg),
        config.resolution,
    )


def _orbit(config, rng):
    return random_orbit_camera(
        rng,
        (config.orbit_radius_min, config.orbit_radius_max),
        (math.radians(config.orbit_elevation_min_deg), math.radians(config.orbit_elevation_max_deg)),
        math.radians(config.fov_deg),
        config.resolution,
    )


def _threads(config):
    return config.threads or None


def demo_reference_cloud(n=400, extent=0.8, seed=11):
    """Opaque sphere shell with a smooth direction-dependent color field."""
    cloud = init_cloud("sphere", n, extent, seed)
    d = cloud.means / extent
    cloud.colors[:] = np.clip(0.5 + 0.45 * d[:, [0, 1, 2]] * np.array([1.0, -1.0, 1.0]), 0.0, 1.0)
    cloud.opacity_logits[:] = math.log(0.95 / 0.05)
    cloud.log_scales[:] += math.log(1.3)
    return cloud


def demo_style_image(size=64, seed=0):
    """Diagonal two-tone stripes with a blue/orange palette."""
    yy, xx = np.mgrid[0:size, 0:size]
    band = ((xx + yy) // max(size // 8, 1)) % 2
    a = np.array([0.95, 0.55, 0.1])
    b = np.array([0.1, 0.25, 0.8])
    return np.where(band[..., None] == 1, a, b).astype(np.float64)


class TelemetryLog:
    def __init__(self, path=None):
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=TELEMETRY_FIELDS)
            self._writer.writeheader()

    def append(self, row):
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _train_lora(denoiser, state, x, camera, config, schedule, rng):
    """One L_psi update of the LoRA factors and camera projection layer."""
    t = sample_timestep(rng, config.t_lo, config.t_hi, schedule)
    eps = rng.standard_normal(x.shape)
    z_t = perturb(x, t, eps, schedule)
    loss, grads = lora_loss_and_grads(denoiser, z_t, t, flatten_extrinsics(camera), eps)
    params = {n: p.detach().numpy() for n, p in denoiser.trainable_parameters().items()}
    adam_step(params, grads, state, config.lr_lora)
    return loss


def _check_finite(value, stage, step, what):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"{stage} step {step}: non-finite {what}", step=step, group=what)


def _unit_rms(grads):
    for name in PARAM_GROUPS:
        g = getattr(grads, name)
        rms = math.sqrt(float(np.mean(g * g)))
        if rms > 0:
            g /= rms
    return grads


class _Predictors:
    """The two branches feeding the guidance difference for one stage."""

    def __init__(self, config, denoiser, schedule, styled_oracle=None, style_tokens=None):
        self.config = config
        self.denoiser = denoiser
        self.schedule = schedule
        self.psi = config.resolved_psi
        self.e_y = encode_text(config.prompt)
        self.phi_oracle = styled_oracle
        self.style_tokens = style_tokens
        # closed-form minimizer of L_psi when renders are deterministic per view
        self.render_oracle = OracleDenoiser(schedule)

    def guidance(self, x, t, eps, camera, cam_id, styled):
        ctx_c = ConditioningContext(e_y=self.e_y, e_c=self.denoiser.camera_token(flatten_extrinsics(camera)).detach(),
                                    camera_id=cam_id)
        if self.phi_oracle is not None:
            phi = self.phi_oracle
            ctx_phi = ConditioningContext(e_I=self.phi_oracle.style_tile if styled else None, camera_id=cam_id,
                                          lambda_scale=self.config.lambda_scale)
        else:
            phi = self.denoiser
            ctx_phi = ConditioningContext(e_y=self.e_y, e_I=self.style_tokens if styled else None,
                                          lambda_scale=self.config.lambda_scale)
        if self.psi == "none":
            return sds_grad(x, t, eps, phi, ctx_phi, self.schedule)
        if self.psi == "oracle":
            self.render_oracle.register(cam_id, x)
            psi = self.render_oracle
        else:
            psi = self.denoiser
        fn = vssd_grad if styled else vsd_grad
        return fn(x, t, eps, phi, ctx_phi, psi, ctx_c, self.schedule)


def _register_o1_view(oracle, cam_id, o1, camera, config, threads):
    out = render(o1, camera, WHITE, threads)
    oracle.register(cam_id, out.rgb, out.alpha if config.style_on_object else None)


def style_tile_for(style_image, config):
    return box_resize(np.asarray(style_image, dtype=np.float64)[..., :3], config.resolution, config.resolution)


def styled_oracle(o1, style_image, config, schedule=None):
    """Style-blended oracle whose per-view targets are ``o1``'s ring renders.

    The blend weight is min(lambda, 1); with ``style_on_object`` it is further
    scaled by the rendered alpha so the style lands on the object only.
    """
    schedule = schedule or make_schedule(config.T, config.beta_min, config.beta_max)
    oracle = OracleDenoiser(schedule, style_tile=style_tile_for(style_image, config),
                            blend=min(config.lambda_scale, 1.0))
    for k, cam in enumerate(ring_cameras(config)):
        _register_o1_view(oracle, f"ring{k}", o1, cam, config, _threads(config))
    return oracle


def _row(stage, step, cam_id, t, grad_img, cloud, out, lora_loss):
    report = surface_loss(cloud)
    stats = radius_stats(out)
    return {
        "stage": stage,
        "step": step,
        "camera": cam_id,
        "t": t,
        "guidance_grad_norm": float(np.linalg.norm(grad_img)),
        "surface_loss": report.loss,
        "log_mean_area": report.log_mean_area,
        "area_p95": float(np.percentile(report.per_gaussian_area, 95)),
        "lora_loss": lora_loss,
        "radius_p95": stats.p95 if stats else 0.0,
    }


def stage1_generate(config: RunConfig, reference=None, init=None, denoiser=None, out_dir=None):
    """Generate the base object with the variational gradient.

    ``reference`` (a cloud) selects the oracle denoiser: each view's target is
    that cloud's render. Without it the toy denoiser guides generation.
    """
    config.validate()
    if config.denoiser == "oracle" and reference is None:
        raise ParameterError("the oracle denoiser needs a reference cloud")
    rng = np.random.default_rng([config.seed, 1])
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    cloud = (init.copy() if init is not None
             else init_cloud(config.init_shape, config.init_n, config.init_extent, config.seed))
    denoiser = denoiser if denoiser is not None else ToyDenoiser(seed=config.seed)
    oracle = OracleDenoiser(schedule) if config.denoiser == "oracle" else None
    preds = _Predictors(config, denoiser, schedule, styled_oracle=oracle)
    ring = ring_cameras(config)
    threads = _threads(config)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    telemetry = TelemetryLog(out_dir / "telemetry.csv" if out_dir else None)
    cloud_state, lora_state = AdamState(), AdamState()
    try:
        for step in range(config.stage1_steps):
            if config.stage1_camera == "random":
                camera, cam_id = _orbit(config, rng), f"orbit{step}"
            else:
                camera, cam_id = ring[step % 4], f"ring{step % 4}"
            if oracle is not None and cam_id not in oracle.targets:
                oracle.register(cam_id, render(reference, camera, WHITE, threads).rgb)
            out = render(cloud, camera, WHITE, threads)
            t = sample_timestep(rng, config.t_lo, config.t_hi, schedule)
            eps = rng.standard_normal(out.rgb.shape)
            grad_img = preds.guidance(out.rgb, t, eps, camera, cam_id, styled=False)
            _check_finite(grad_img, "stage1", step, "guidance")
            grads = render_backward(cloud, camera, out, grad_img, threads)
            cloud_adam_step(cloud, grads, cloud_state, config.learning_rates, config.freeze_geometry)
            if oracle is not None and cam_id.startswith("orbit"):
                oracle.forget(cam_id)
                preds.render_oracle.forget(cam_id)
            lora = math.nan
            for _ in range(config.lora_updates_per_step):
                lora = _train_lora(denoiser, lora_state, out.rgb, camera, config, schedule, rng)
            telemetry.append(_row("stage1", step, cam_id, t, grad_img, cloud, out, lora))
    finally:
        telemetry.close()
    if out_dir is not None:
        save_ply(cloud, out_dir / "stage1.ply")
        save_weights(denoiser, out_dir / "denoiser_stage1")
    return StageResult(cloud=cloud, denoiser=denoiser, telemetry=telemetry.rows)


def stage2_stylize(o1: GaussianCloud, style_image, config: RunConfig, denoiser=None, out_dir=None):
    """Distill the style image into ``o1`` with the stylized variational gradient."""
    config.validate()
    if style_image is None:
        raise ParameterError("stage 2 needs a style image")
    rng = np.random.default_rng([config.seed, 2])
    schedule = make_schedule(config.T, config.beta_min, config.beta_max)
    style_tile = style_tile_for(style_image, config)
    # the caller's denoiser is left untouched; the camera projection carries
    # over and the LoRA factors start from zero delta again
    denoiser = copy.deepcopy(denoiser) if denoiser is not None else ToyDenoiser(seed=config.seed)
    denoiser.reset_lora(seed=config.seed + 1)
    threads = _threads(config)
    ring = ring_cameras(config)

    oracle = None
    style_tokens = None
    if config.denoiser == "oracle":
        oracle = styled_oracle(o1, style_image, config, schedule)
    else:
        with torch.no_grad():
            style_tokens = denoiser.style_tokens(style_tile)
    preds = _Predictors(config, denoiser, schedule, styled_oracle=oracle, style_tokens=style_tokens)

    cloud = o1.copy()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    telemetry = TelemetryLog(out_dir / "telemetry.csv" if out_dir else None)
    cloud_state, lora_state = AdamState(), AdamState()
    try:
        for step in range(config.stage2_steps):
            if config.camera_strategy == "fixed-ring-4":
                camera, cam_id = ring[step % 4], f"ring{step % 4}"
            else:
                camera, cam_id = _orbit(config, rng), f"orbit{step}"
                if oracle is not None:
                    _register_o1_view(oracle, cam_id, o1, camera, config, threads)
            out = render(cloud, camera, WHITE, threads)
            t = sample_timestep(rng, config.t_lo, config.t_hi, schedule)
            eps = rng.standard_normal(out.rgb.shape)
            grad_img = preds.guidance(out.rgb, t, eps, camera, cam_id, styled=True)
            if config.alpha_mask_guidance:
                grad_img = grad_img * out.alpha[..., None]
            _check_finite(grad_img, "stage2", step, "guidance")
            grads = _unit_rms(render_backward(cloud, camera, out, grad_img, threads))
            if config.surface_weight:
                grads.log_scales += config.surface_weight * len(cloud) * surface_loss_grad(
                    cloud, config.surface_mean_of_logs)
            cloud_adam_step(cloud, grads, cloud_state, config.learning_rates, config.freeze_geometry)
            if cam_id.startswith("orbit"):
                if oracle is not None:
                    oracle.forget(cam_id)
                preds.render_oracle.forget(cam_id)
            lora = math.nan
            for _ in range(config.lora_updates_per_step):
                lora = _train_lora(denoiser, lora_state, out.rgb, camera, config, schedule, rng)
            telemetry.append(_row("stage2", step, cam_id, t, grad_img, cloud, out, lora))
    finally:
        telemetry.close()
    if out_dir is not None:
        save_ply(cloud, out_dir / "stylized.ply")
        save_weights(denoiser, out_dir / "denoiser_stage2")
        for k, cam in enumerate(ring):
            write_png(out_dir / "turntable" / f"view{k}.png", render(cloud, cam, WHITE, threads).rgb)
    return StageResult(cloud=cloud, denoiser=denoiser, telemetry=telemetry.rows)
