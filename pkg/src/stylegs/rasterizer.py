"""Differentiable EWA splatting with an analytic backward pass.

Compositing is front-to-back over a global depth sort of the visible
Gaussians. Pixels are processed in fixed ``TILE_SIZE`` square tiles, each
seeing only the Gaussians that can reach the 1/255 opacity threshold inside
it; the backward pass reduces per-Gaussian gradients tile by tile in a fixed
order, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .gaussians import (
    CloudGrads,
    GaussianCloud,
    normalize_quaternions,
    normalize_vjp,
    quaternion_matrix_vjp,
    quaternion_to_matrix,
)

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
COV2D_DILATION = 0.3
TILE_SIZE = 16
RADIUS_SIGMAS = 3.0
THREADS_ENV = "STYLEGS_THREADS"


def default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    screen_radii: np.ndarray  # (N,), 0 for culled
    sort_order: np.ndarray  # visible indices, nearest first
    background: np.ndarray  # (3,)
    support: "Support | None" = None

    @property
    def rgb_premultiplied(self):
        return self.rgb - (1.0 - self.alpha)[..., None] * self.background


@dataclass
class Support:
    """Per-pixel skip/clamp decisions of one forward pass, shape (K, H*W)."""

    sort_order: np.ndarray
    active: np.ndarray
    clamped: np.ndarray


@dataclass
class _Projected:
    index: np.ndarray  # (K,) original Gaussian indices, depth-sorted
    cam: np.ndarray  # (K, 3) camera-space means
    mean2d: np.ndarray  # (K, 2)
    jac: np.ndarray  # (K, 2, 3)
    cov_cam: np.ndarray  # (K, 3, 3)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 2, 2)
    rot: np.ndarray  # (K, 3, 3)
    var: np.ndarray  # (K, 3) squared scales
    opacity: np.ndarray  # (K,)
    colors: np.ndarray  # (K, 3)
    radii: np.ndarray  # (N,)


def _jacobian(camera, cam):
    f = camera.focal
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    jac = np.zeros(cam.shape[:-1] + (2, 3))
    jac[..., 0, 0] = f / z
    jac[..., 0, 2] = -f * x / z**2
    jac[..., 1, 1] = f / z
    jac[..., 1, 2] = -f * y / z**2
    return jac


def _screen(camera, cam):
    f = camera.focal
    u = f * cam[..., 0] / cam[..., 2] + 0.5 * camera.width
    v = f * cam[..., 1] / cam[..., 2] + 0.5 * camera.height
    return np.stack([u, v], axis=-1)


def project_gaussian(camera, mean, cov3d):
    """Project one Gaussian; returns ``(mean2d, cov2d, depth)`` or None if culled."""
    cam = camera.world_to_camera(np.asarray(mean, dtype=np.float64))
    depth = float(cam[2])
    if not camera.near < depth < camera.far:
        return None
    w = camera.w2c_rotation
    jac = _jacobian(camera, cam)
    cov2d = jac @ w @ np.asarray(cov3d, dtype=np.float64) @ w.T @ jac.T
    cov2d = 0.5 * (cov2d + cov2d.T) + COV2D_DILATION * np.eye(2)
    return _screen(camera, cam), cov2d, depth


def _project(cloud, camera):
    n = len(cloud)
    radii = np.zeros(n)
    cam_all = camera.world_to_camera(cloud.means)
    depth = cam_all[:, 2]
    visible = np.flatnonzero((depth > camera.near) & (depth < camera.far))
    # stable sort keeps ties in index order
    index = visible[np.argsort(depth[visible], kind="stable")]

    cam = cam_all[index]
    rot = quaternion_to_matrix(normalize_quaternions(cloud.rotations[index]))
    var = np.exp(2.0 * cloud.log_scales[index])
    cov3d = (rot * var[:, None, :]) @ np.swapaxes(rot, 1, 2)
    w = camera.w2c_rotation
    cov_cam = w @ cov3d @ w.T
    jac = _jacobian(camera, cam)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2) + COV2D_DILATION * np.eye(2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det

    eig_max = np.linalg.eigvalsh(cov2d)[:, -1] if len(index) else np.zeros(0)
    radii[index] = RADIUS_SIGMAS * np.sqrt(eig_max)
    return _Projected(
        index=index,
        cam=cam,
        mean2d=_screen(camera, cam),
        jac=jac,
        cov_cam=cov_cam,
        cov2d=cov2d,
        conic=conic,
        rot=rot,
        var=var,
        opacity=cloud.opacities[index],
        colors=cloud.colors[index],
        radii=radii,
    )


def _tiles(camera):
    return [
        (r, min(r + TILE_SIZE, camera.height), c, min(c + TILE_SIZE, camera.width))
        for r in range(0, camera.height, TILE_SIZE)
        for c in range(0, camera.width, TILE_SIZE)
    ]


def _tile_pixels(camera, tile):
    r0, r1, c0, c1 = tile
    ys, xs = np.mgrid[r0:r1, c0:c1]
    flat = (ys * camera.width + xs).reshape(-1)
    return xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5, flat


def _cutoff_radius(proj):
    # outside this distance opacity * gaussian < ALPHA_MIN for every pixel
    eig_max = np.linalg.eigvalsh(proj.cov2d)[:, -1] if len(proj.index) else np.zeros(0)
    level = np.log(np.maximum(proj.opacity, 1e-300) / ALPHA_MIN)
    return np.where(level > 0, np.sqrt(2.0 * eig_max * np.maximum(level, 0.0)), -1.0)


def _tile_members(proj, cutoff, tile, flat, support):
    """Depth-ordered positions (into proj) of Gaussians that can touch the tile."""
    if support is not None:
        return np.flatnonzero(support.active[:, flat].any(axis=1))
    r0, r1, c0, c1 = tile
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    hit = (
        (cutoff >= 0)
        & (mx + cutoff >= c0 + 0.5) & (mx - cutoff <= c1 - 0.5)
        & (my + cutoff >= r0 + 0.5) & (my - cutoff <= r1 - 0.5)
    )
    return np.flatnonzero(hit)


def _tile_alpha(mean2d, conic, opacity, px, py, active=None, clamped=None):
    dx = px[None, :] - mean2d[:, 0:1]
    dy = py[None, :] - mean2d[:, 1:2]
    a = conic[:, 0, 0:1]
    b = conic[:, 0, 1:2]
    c = conic[:, 1, 1:2]
    gauss = np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
    raw = opacity[:, None] * gauss
    if active is None:
        active = raw >= ALPHA_MIN
        clamped = raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, raw) * active
    return dx, dy, gauss, raw, alpha, active, clamped


def _transmittance(alpha):
    k, p = alpha.shape
    trans = np.empty((k + 1, p))
    trans[0] = 1.0
    np.cumprod(1.0 - alpha, axis=0, out=trans[1:])
    return trans[:-1], trans[-1]


def _forward_tile(proj, cutoff, camera, bg, tile, support):
    px, py, flat = _tile_pixels(camera, tile)
    members = _tile_members(proj, cutoff, tile, flat, support)
    act = None if support is None else support.active[members][:, flat]
    clp = None if support is None else support.clamped[members][:, flat]
    _, _, _, _, alpha, active, clamped = _tile_alpha(
        proj.mean2d[members], proj.conic[members], proj.opacity[members], px, py, act, clp
    )
    trans, final = _transmittance(alpha)
    rgb = (alpha * trans).T @ proj.colors[members] + final[:, None] * bg[None, :]
    return flat, members, rgb, 1.0 - final, active, clamped


def _run(fn, items, threads):
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def render(cloud, camera, background=(1.0, 1.0, 1.0), threads=None, keep_support=False,
           support=None):
    """Render ``cloud`` from ``camera``.

    ``support`` replays the skip/clamp decisions of an earlier pass; it exists
    for finite-difference checks, which must stay on one smooth piece of the
    piecewise-smooth render function.
    """
    cloud.check_finite()
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    proj = _project(cloud, camera)
    if support is not None and not np.array_equal(support.sort_order, proj.index):
        raise ParameterError("support was recorded for a different depth order")
    cutoff = _cutoff_radius(proj)
    h, w = camera.height, camera.width
    parts = _run(lambda tile: _forward_tile(proj, cutoff, camera, bg, tile, support), _tiles(camera), threads)
    rgb = np.empty((h * w, 3))
    alpha = np.empty(h * w)
    kept = None
    if keep_support:
        kept = Support(proj.index.copy(), np.zeros((len(proj.index), h * w), bool),
                       np.zeros((len(proj.index), h * w), bool))
    for flat, members, tile_rgb, tile_alpha, active, clamped in parts:
        rgb[flat] = tile_rgb
        alpha[flat] = tile_alpha
        if kept is not None:
            kept.active[np.ix_(members, flat)] = active
            kept.clamped[np.ix_(members, flat)] = clamped
    return RenderOutput(rgb=rgb.reshape(h, w, 3), alpha=alpha.reshape(h, w), screen_radii=proj.radii,
                        sort_order=proj.index, background=bg, support=kept)


def _backward_tile(proj, cutoff, camera, bg, grad, tile):
    px, py, flat = _tile_pixels(camera, tile)
    members = _tile_members(proj, cutoff, tile, flat, None)
    g = grad[flat]
    mean2d, conic = proj.mean2d[members], proj.conic[members]
    colors = proj.colors[members]
    dx, dy, gauss, raw, alpha, active, clamped = _tile_alpha(mean2d, conic, proj.opacity[members], px, py)
    trans, final = _transmittance(alpha)
    weights = alpha * trans

    grad_colors = weights @ g
    cg = colors @ g.T  # (K, P)
    contrib = weights * cg
    # light arriving from behind each splat: sum_{j>k} w_j c_j . g + T_final bg . g
    behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib + (final * (g @ bg))[None, :]
    grad_alpha = trans * cg - behind / (1.0 - alpha)
    grad_raw = grad_alpha * (active & ~clamped)

    grad_opacity = np.sum(grad_raw * gauss, axis=1)
    grad_power = grad_raw * raw
    a = conic[:, 0, 0:1]
    b = conic[:, 0, 1:2]
    c = conic[:, 1, 1:2]
    grad_mean2d = np.stack(
        [np.sum(grad_power * (a * dx + b * dy), axis=1), np.sum(grad_power * (b * dx + c * dy), axis=1)],
        axis=1,
    )
    g00 = np.sum(grad_power * (-0.5 * dx * dx), axis=1)
    g01 = np.sum(grad_power * (-0.5 * dx * dy), axis=1)
    g11 = np.sum(grad_power * (-0.5 * dy * dy), axis=1)
    grad_conic = np.stack([np.stack([g00, g01], -1), np.stack([g01, g11], -1)], axis=1)
    return members, grad_colors, grad_opacity, grad_mean2d, grad_conic


def render_backward(cloud, camera, render_output, grad_rgb, threads=None):
    """Gradient of ``<grad_rgb, rgb>`` with respect to every cloud parameter."""
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != render_output.rgb.shape:
        raise ParameterError(f"grad_rgb has shape {grad_rgb.shape}, expected {render_output.rgb.shape}")
    if len(render_output.screen_radii) != len(cloud):
        raise ParameterError("render output does not belong to this cloud")
    proj = _project(cloud, camera)
    if not np.array_equal(proj.index, render_output.sort_order):
        raise ParameterError("render output was produced for a different cloud or camera")
    out = CloudGrads.zeros_like(cloud)
    k = len(proj.index)
    if k == 0:
        return out
    bg = render_output.background
    cutoff = _cutoff_radius(proj)
    flat_grad = grad_rgb.reshape(-1, 3)
    parts = _run(lambda tile: _backward_tile(proj, cutoff, camera, bg, flat_grad, tile), _tiles(camera), threads)
    grad_colors = np.zeros((k, 3))
    grad_opacity = np.zeros(k)
    grad_mean2d = np.zeros((k, 2))
    grad_conic = np.zeros((k, 2, 2))
    for members, gc, go, gm, gq in parts:  # fixed tile order
        grad_colors[members] += gc
        grad_opacity[members] += go
        grad_mean2d[members] += gm
        grad_conic[members] += gq

    conic, jac, cov_cam = proj.conic, proj.jac, proj.cov_cam
    grad_cov2d = -conic @ grad_conic @ conic
    grad_jac = 2.0 * grad_cov2d @ jac @ cov_cam
    grad_cov_cam = np.swapaxes(jac, 1, 2) @ grad_cov2d @ jac
    w = camera.w2c_rotation
    grad_cov3d = w.T @ grad_cov_cam @ w

    f = camera.focal
    x, y, z = proj.cam[:, 0], proj.cam[:, 1], proj.cam[:, 2]
    grad_cam = np.zeros((k, 3))
    grad_cam[:, 0] = grad_mean2d[:, 0] * f / z - grad_jac[:, 0, 2] * f / z**2
    grad_cam[:, 1] = grad_mean2d[:, 1] * f / z - grad_jac[:, 1, 2] * f / z**2
    grad_cam[:, 2] = (
        -grad_mean2d[:, 0] * f * x / z**2
        - grad_mean2d[:, 1] * f * y / z**2
        - grad_jac[:, 0, 0] * f / z**2
        + grad_jac[:, 0, 2] * 2.0 * f * x / z**3
        - grad_jac[:, 1, 1] * f / z**2
        + grad_jac[:, 1, 2] * 2.0 * f * y / z**3
    )

    rot, var = proj.rot, proj.var
    grad_rot = 2.0 * grad_cov3d @ rot * var[:, None, :]
    rgr = np.swapaxes(rot, 1, 2) @ grad_cov3d @ rot
    grad_log_scales = 2.0 * var * np.diagonal(rgr, axis1=1, axis2=2)
    q_raw = cloud.rotations[proj.index]
    grad_q = normalize_vjp(q_raw, quaternion_matrix_vjp(normalize_quaternions(q_raw), grad_rot))
    o = proj.opacity

    idx = proj.index
    out.means[idx] = grad_cam @ w
    out.rotations[idx] = grad_q
    out.log_scales[idx] = grad_log_scales
    out.opacity_logits[idx, 0] = grad_opacity * o * (1.0 - o)
    out.colors[idx] = grad_colors
    return out


@dataclass(frozen=True)
class RadiusStats:
    mean: float
    p50: float
    p95: float
    count: int


def radius_stats(render_output):
    """Summary of nonzero screen radii; None when nothing is visible."""
    r = render_output.screen_radii
    r = r[r > 0]
    if r.size == 0:
        return None
    return RadiusStats(float(np.mean(r)), float(np.percentile(r, 50)), float(np.percentile(r, 95)), int(r.size))
