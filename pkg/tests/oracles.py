"""Independent reference computations used only by the tests."""

import math

import numpy as np
from scipy.special import ellipeinc, ellipkinc


def quadrature_ellipsoid_area(a, b, c, nodes=64):
    """Surface integral of the ellipsoid by tensor Gauss-Legendre over one octant."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    ang = (x + 1.0) * math.pi / 4.0
    wt = w * math.pi / 4.0
    th, ph = np.meshgrid(ang, ang, indexing="ij")
    weights = np.outer(wt, wt)
    a, b, c = (np.asarray(v, dtype=np.float64)[..., None, None] for v in (a, b, c))
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    integrand = st * np.sqrt(
        (b * c * st * cp) ** 2 + (a * c * st * sp) ** 2 + (a * b * ct) ** 2
    )
    return 8.0 * np.sum(integrand * weights, axis=(-2, -1))


def elliptic_ellipsoid_area(a, b, c):
    """Closed form via incomplete elliptic integrals (needs distinct axes)."""
    a, b, c = sorted((a, b, c), reverse=True)
    phi = math.acos(c / a)
    m = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c))
    s = math.sin(phi)
    return 2 * math.pi * c * c + 2 * math.pi * a * b / s * (ellipeinc(phi, m) * s * s + ellipkinc(phi, m) * (1 - s * s))


def rotation_z(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def explicit_covariance(scales, rot):
    s = np.diag(scales)
    return rot @ s @ s.T @ rot.T


def naive_render(means, quats, scales, opacities, colors, c2w, fov_y, width, height, bg,
                 near=0.01, dilation=0.3, alpha_max=0.999, alpha_min=1.0 / 255.0):
    """Per-pixel front-to-back compositing written from scratch, no tiling or culling radius."""
    rot_w2c = c2w[:3, :3].T
    t_w2c = -rot_w2c @ c2w[:3, 3]
    f = 0.5 * height / math.tan(0.5 * fov_y)
    splats = []
    for mu, q, s, o, col in zip(means, quats, scales, opacities, colors):
        x, y, z = rot_w2c @ mu + t_w2c
        if z <= near:
            continue
        w, qx, qy, qz = q / np.linalg.norm(q)
        r = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - w * qz), 2 * (qx * qz + w * qy)],
            [2 * (qx * qy + w * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - w * qx)],
            [2 * (qx * qz - w * qy), 2 * (qy * qz + w * qx), 1 - 2 * (qx * qx + qy * qy)],
        ])
        cov = r @ np.diag(np.asarray(s) ** 2) @ r.T
        j = np.array([[f / z, 0, -f * x / z**2], [0, f / z, -f * y / z**2]])
        cov2 = j @ rot_w2c @ cov @ rot_w2c.T @ j.T + dilation * np.eye(2)
        centre = np.array([f * x / z + width / 2, f * y / z + height / 2])
        splats.append((z, centre, np.linalg.inv(cov2), o, np.asarray(col)))
    splats.sort(key=lambda sp: sp[0])
    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            p = np.array([px + 0.5, py + 0.5])
            trans = 1.0
            acc = np.zeros(3)
            for _, centre, conic, o, col in splats:
                d = p - centre
                a = min(o * math.exp(-0.5 * d @ conic @ d), alpha_max)
                if a < alpha_min:
                    continue
                acc += trans * a * col
                trans *= 1 - a
            rgb[py, px] = acc + trans * np.asarray(bg)
            alpha[py, px] = 1 - trans
    return rgb, alpha
