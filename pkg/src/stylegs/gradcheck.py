"""Finite-difference verification of every analytic gradient in the package.

Each check compares an analytic gradient with a central difference and
reports the worst relative error per parameter group; the denominator of the
relative error is floored so that near-zero entries do not blow it up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import rasterizer
from .camera import fixed_ring_cameras, flatten_extrinsics
from .gaussians import PARAM_GROUPS, GaussianCloud
from .guidance import ToyDenoiser, lora_loss, lora_loss_and_grads, make_schedule, perturb
from .regularizer import surface_loss, surface_loss_grad

SCOPES = ("rasterizer", "regularizer", "guidance")

RASTER_TOL, RASTER_FLOOR, RASTER_STEP = 1e-3, 1e-6, 1e-4
REG_TOL, REG_FLOOR, REG_STEP = 1e-6, 1e-9, 1e-5
GUIDE_TOL, GUIDE_FLOOR, GUIDE_STEP = 1e-4, 1e-9, 1e-4


@dataclass
class GroupResult:
    scope: str
    group: str
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def line(self):
        status = "ok" if self.passed else "FAIL"
        return (f"{self.scope:<11} {self.group:<34} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} n={self.checked} {status}")


def relative_error(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class _Worst:
    def __init__(self):
        self.err = {}
        self.count = {}

    def add(self, group, analytic, numeric, floor):
        e = relative_error(float(analytic), float(numeric), floor)
        self.err[group] = max(self.err.get(group, 0.0), e)
        self.count[group] = self.count.get(group, 0) + 1

    def results(self, scope, tol):
        return [GroupResult(scope, g, self.err[g], tol, self.count[g]) for g in self.err]


def random_scene(seed, n=8, resolution=32):
    """Small random cloud in front of one of the ring cameras."""
    rng = np.random.default_rng(seed)
    cloud = GaussianCloud(
        means=rng.uniform(-0.5, 0.5, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(0.15) + 0.3 * rng.normal(size=(n, 3)),
        opacity_logits=rng.normal(size=(n, 1)),
        colors=rng.uniform(size=(n, 3)),
    )
    camera = fixed_ring_cameras(4, resolution=resolution)[seed % 4]
    grad_rgb = rng.normal(size=(resolution, resolution, 3))
    return cloud, camera, grad_rgb


def check_rasterizer(seeds=range(20), backward=None):
    """Backward pass against central differences of <g, render(cloud).rgb>.

    The forward pass is replayed with the recorded skip/clamp support so the
    difference quotient never straddles a kink of the piecewise-smooth render.
    """
    backward = backward or rasterizer.render_backward
    worst = _Worst()
    h = RASTER_STEP
    for seed in seeds:
        cloud, camera, g = random_scene(seed)
        out = rasterizer.render(cloud, camera, keep_support=True)
        analytic = backward(cloud, camera, out, g)
        for name in PARAM_GROUPS:
            arr = getattr(cloud, name)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                fp = np.sum(g * rasterizer.render(cloud, camera, support=out.support).rgb)
                arr[idx] = old - h
                fm = np.sum(g * rasterizer.render(cloud, camera, support=out.support).rgb)
                arr[idx] = old
                worst.add(name, getattr(analytic, name)[idx], (fp - fm) / (2 * h), RASTER_FLOOR)
    return worst.results("rasterizer", RASTER_TOL)


def check_regularizer(seed=0, n=10, grad_fn=None):
    grad_fn = grad_fn or surface_loss_grad
    rng = np.random.default_rng(seed)
    log_scales = rng.normal(-2.0, 0.5, (n, 3))
    worst = _Worst()
    h = REG_STEP
    for mean_of_logs in (False, True):
        group = "log_scales (mean of logs)" if mean_of_logs else "log_scales"
        analytic = grad_fn(log_scales, mean_of_logs)
        for idx in np.ndindex(log_scales.shape):
            old = log_scales[idx]
            log_scales[idx] = old + h
            fp = surface_loss(log_scales, mean_of_logs).loss
            log_scales[idx] = old - h
            fm = surface_loss(log_scales, mean_of_logs).loss
            log_scales[idx] = old
            worst.add(group, analytic[idx], (fp - fm) / (2 * h), REG_FLOOR)
    return worst.results("regularizer", REG_TOL)


def check_guidance(seed=0, size=16, per_tensor=12):
    """L_psi gradients for LoRA factors, camera projection and the base denoiser weights.

    LoRA B factors are randomized first; with B = 0 the A gradients vanish
    identically and the check would be vacuous. Many entries are tiny, so the
    oracle is a five-point stencil (truncation O(h^4), small roundoff).
    """
    rng = np.random.default_rng(seed)
    denoiser = ToyDenoiser(seed=seed)
    with torch.no_grad():
        for name, p in denoiser.lora_parameters().items():
            if name.endswith(".B"):
                p.copy_(torch.as_tensor(rng.normal(0.0, 0.1, tuple(p.shape))))
    schedule = make_schedule()
    t = int(rng.integers(0, schedule.T))
    eps = rng.standard_normal((size, size, 3))
    z_t = perturb(rng.uniform(size=(size, size, 3)), t, eps, schedule)
    flat = flatten_extrinsics(fixed_ring_cameras(4, resolution=size)[seed % 4])
    _, analytic = lora_loss_and_grads(denoiser, z_t, t, flat, eps, include_base=True)

    def loss():
        with torch.no_grad():
            return float(lora_loss(denoiser, z_t, t, flat, eps))

    worst = _Worst()
    h = GUIDE_STEP
    params = dict(denoiser.named_parameters())
    for name, p in params.items():
        if name.startswith("lora."):
            group = "lora." + name.rsplit(".", 2)[-2] + "." + name.rsplit(".", 1)[-1]
        elif name.startswith("camera_proj."):
            group = name
        else:
            group = "base"
        data = p.data.view(-1)
        picks = rng.choice(data.numel(), size=min(per_tensor, data.numel()), replace=False)
        for i in picks:
            old = float(data[i])
            f = {}
            for k in (-2, -1, 1, 2):
                data[i] = old + k * h
                f[k] = loss()
            data[i] = old
            numeric = (8.0 * (f[1] - f[-1]) - (f[2] - f[-2])) / (12.0 * h)
            worst.add(group, analytic[name].reshape(-1)[i], numeric, GUIDE_FLOOR)
    return worst.results("guidance", GUIDE_TOL)


def run(scope="all", seed=0, n_scenes=20):
    """Run one scope or all of them; rasterizer scenes use seeds seed..seed+n_scenes-1."""
    if scope != "all" and scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    if scope in ("all", "rasterizer"):
        results += check_rasterizer(range(seed, seed + n_scenes))
    if scope in ("all", "regularizer"):
        results += check_regularizer(seed)
    if scope in ("all", "guidance"):
        results += check_guidance(seed)
    return results
