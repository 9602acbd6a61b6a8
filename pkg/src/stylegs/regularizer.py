"""Ellipsoid surface-area approximation and the log-area spread penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError

THOMSEN_P = 1.6075
_PAIRS = ((0, 1), (0, 2), (1, 2))
_LOG_4PI = math.log(4.0 * math.pi)


@dataclass
class SurfaceLossReport:
    loss: float
    per_gaussian_area: np.ndarray
    log_mean_area: float

    def csv_row(self, step):
        return {
            "step": step,
            "surface_loss": self.loss,
            "log_mean_area": self.log_mean_area,
            "area_p95": float(np.percentile(self.per_gaussian_area, 95)),
        }


def ellipsoid_surface_area(a, b, c):
    """Approximate surface area 4*pi*((a^p b^p + a^p c^p + b^p c^p)/3)^(1/p)."""
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (a, b, c))
    if np.any(a <= 0) or np.any(b <= 0) or np.any(c <= 0):
        raise ParameterError("ellipsoid axes must be positive")
    log_axes = np.stack(np.broadcast_arrays(np.log(a), np.log(b), np.log(c)), axis=-1)
    area = np.exp(log_area(log_axes))
    return float(area) if area.ndim == 0 else area


def log_area(log_scales):
    """log of the approximate area from log axis lengths, stable for any scale."""
    ls = np.asarray(log_scales, dtype=np.float64)
    terms = np.stack([THOMSEN_P * (ls[..., i] + ls[..., j]) for i, j in _PAIRS], axis=-1)
    return _LOG_4PI + (logsumexp(terms, axis=-1) - math.log(3.0)) / THOMSEN_P


def _log_area_grad(ls):
    terms = np.stack([THOMSEN_P * (ls[..., i] + ls[..., j]) for i, j in _PAIRS], axis=-1)
    w = np.exp(terms - logsumexp(terms, axis=-1, keepdims=True))
    # d log A / d ls_i = sum of the normalized weights of the pairs containing i
    return np.stack([w[..., 0] + w[..., 1], w[..., 0] + w[..., 2], w[..., 1] + w[..., 2]], axis=-1)


def _center(log_areas, mean_of_logs):
    if mean_of_logs:
        return float(np.mean(log_areas))
    return float(logsumexp(log_areas) - math.log(len(log_areas)))


def surface_loss(cloud, mean_of_logs=False):
    """Spread of log surface areas around the log of the mean area.

    With ``mean_of_logs`` the center is the mean log-area instead, making the
    loss the plain variance of log areas.
    """
    ls = cloud.log_scales if hasattr(cloud, "log_scales") else np.asarray(cloud)
    if len(ls) == 0:
        raise ParameterError("surface loss needs a non-empty cloud")
    la = log_area(ls)
    center = _center(la, mean_of_logs)
    loss = float(np.mean((la - center) ** 2))
    return SurfaceLossReport(loss=loss, per_gaussian_area=np.exp(la), log_mean_area=center)


def surface_loss_grad(cloud, mean_of_logs=False):
    """Exact gradient of :func:`surface_loss` with respect to the log-scales."""
    ls = cloud.log_scales if hasattr(cloud, "log_scales") else np.asarray(cloud)
    n = len(ls)
    if n == 0:
        raise ParameterError("surface loss needs a non-empty cloud")
    la = log_area(ls)
    center = _center(la, mean_of_logs)
    dev = la - center
    grad_la = (2.0 / n) * dev
    if not mean_of_logs:
        # the center depends on every area through the arithmetic mean
        share = np.exp(la - center) / n
        grad_la = grad_la - (2.0 / n) * np.sum(dev) * share
    return grad_la[:, None] * _log_area_grad(ls)
