"""Gaussian cloud representation, covariance construction and initialization."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError

INIT_OPACITY = 0.1
INIT_COLOR = 0.5

PARAM_GROUPS = ("means", "rotations", "log_scales", "opacity_logits", "colors")
GEOMETRY_GROUPS = ("means", "rotations", "log_scales")


@dataclass
class GaussianCloud:
    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N, 1)
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        n = len(self.means)
        expected = {"means": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1, "colors": 3}
        for name, width in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1 and width == 1:
                arr = arr[:, None]
            if arr.shape != (n, width):
                raise ParameterError(f"{name} has shape {arr.shape}, expected ({n}, {width})")
            setattr(self, name, arr)

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logits[:, 0]))

    def params(self):
        """Parameter arrays by group name (the arrays themselves, not copies)."""
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self):
        return GaussianCloud(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def check_finite(self):
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"non-finite values in {name}")
        if not np.all(np.isfinite(self.scales)) or np.any(self.scales <= 0):
            raise ParameterError("scales must be finite and positive")

    def normalize(self):
        """Renormalize quaternions and clamp colors in place."""
        self.rotations[:] = normalize_quaternions(self.rotations)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)
        return self

    def equals(self, other):
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in PARAM_GROUPS
        )


@dataclass
class CloudGrads:
    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros_like(cls, cloud):
        return cls(**{name: np.zeros_like(getattr(cloud, name)) for name in PARAM_GROUPS})

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def check(self, cloud):
        for name in PARAM_GROUPS:
            g = getattr(self, name)
            if g.shape != getattr(cloud, name).shape:
                raise ParameterError(f"gradient {name} has shape {g.shape}")
            if not np.all(np.isfinite(g)):
                raise ParameterError(f"non-finite gradient in {name}")


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_matrix(q):
    """Rotation matrices for unit quaternions (w, x, y, z); accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rot = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(q.shape[:-1] + (3, 3))


def quaternion_matrix_vjp(q, grad_rot):
    """Pull a gradient on R(q) back to the (unit) quaternion components."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = grad_rot
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_vjp(q_raw, grad_unit):
    """Gradient through q / |q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    unit = q_raw / norm
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=-1, keepdims=True)) / norm


def covariance_from_params(log_scale, quat):
    """Sigma = R diag(exp(2 s)) R^T for one Gaussian or a batch."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    quat = np.asarray(quat, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(quat))):
        raise ParameterError("covariance parameters must be finite")
    rot = quaternion_to_matrix(normalize_quaternions(quat))
    var = np.exp(2.0 * log_scale)
    cov = (rot * var[..., None, :]) @ np.swapaxes(rot, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _logit(p):
    return float(np.log(p / (1.0 - p)))


def init_cloud(shape, n, extent=1.0, seed=0, points=None):
    """Initialize a cloud on a primitive.

    ``sphere`` places means on the surface of a sphere of radius ``extent``;
    ``box`` samples uniformly inside the cube ``[-extent/2, extent/2]^3``;
    ``loaded`` takes caller-supplied ``points``.
    """
    if n is None or n < 1:
        raise ParameterError("n must be >= 1")
    if not extent > 0:
        raise ParameterError("extent must be > 0")
    rng = np.random.default_rng(seed)
    if shape == "sphere":
        d = rng.standard_normal((n, 3))
        means = extent * d / np.linalg.norm(d, axis=1, keepdims=True)
    elif shape == "box":
        means = rng.uniform(-0.5 * extent, 0.5 * extent, size=(n, 3))
    elif shape == "loaded":
        if points is None:
            raise ParameterError("shape 'loaded' needs points")
        means = np.asarray(points, dtype=np.float64)[:n].copy()
        n = len(means)
    else:
        raise ParameterError(f"unknown shape {shape!r}")

    if n > 1:
        dist, _ = cKDTree(means).query(means, k=2)
        spacing = float(np.mean(dist[:, 1]))
    else:
        spacing = 0.2 * extent
    log_scale = np.log(max(spacing, 1e-6) / 2.0)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        means=means,
        rotations=rotations,
        log_scales=np.full((n, 3), log_scale),
        opacity_logits=np.full((n, 1), _logit(INIT_OPACITY)),
        colors=np.full((n, 3), INIT_COLOR),
    )
