"""Masked image metrics and a Gram-matrix style distance over a fixed filter bank."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .imageops import box_resize


def object_mask(render_output, tau=0.5):
    alpha = getattr(render_output, "alpha", render_output)
    if not 0.0 < tau < 1.0:
        raise ParameterError("tau must lie in (0, 1)")
    return np.asarray(alpha) > tau


def _check_pair(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or a.shape[:2] != mask.shape:
        raise ParameterError(f"incongruent shapes {a.shape}, {b.shape}, mask {mask.shape}")
    return a, b, mask


def masked_rmse(image_a, image_b, mask):
    """RMS difference over masked pixels and all channels; None for an empty mask."""
    a, b, mask = _check_pair(image_a, image_b, mask)
    if not mask.any():
        return None
    return float(np.sqrt(np.mean((a[mask] - b[mask]) ** 2)))


def psnr(image_a, image_b, mask):
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf for identical inputs."""
    rmse = masked_rmse(image_a, image_b, mask)
    if rmse is None:
        return None
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(1.0 / rmse)


@dataclass
class StyleFeatureBank:
    """Frozen random filters at several spatial scales, followed by ReLU."""

    seed: int = 0
    n_filters: int = 16
    sizes: tuple = (3, 5, 7)
    filters: list = field(init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.filters = [
            rng.standard_normal((self.n_filters, k, k, 3)) / math.sqrt(3 * k * k) for k in self.sizes
        ]

    def responses(self, image):
        """List of (H, W, n_filters) feature maps, one per scale."""
        image = np.asarray(image, dtype=np.float64)
        out = []
        for bank in self.filters:
            k = bank.shape[1]
            pad = k // 2
            padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
            windows = sliding_window_view(padded, (k, k), axis=(0, 1))  # (H, W, 3, k, k)
            feats = np.einsum("hwcij,fijc->hwf", windows, bank, optimize=True)
            out.append(np.maximum(feats, 0.0))
        return out


def gram_matrices(image, bank, mask=None):
    grams = []
    for feats in bank.responses(image):
        flat = feats.reshape(-1, feats.shape[-1]) if mask is None else feats[mask]
        grams.append(flat.T @ flat / len(flat))
    return grams


def gram_style_distance(image, style_image, bank, mask=None):
    """Mean Frobenius distance between per-scale Gram matrices.

    ``mask`` restricts the statistics of ``image``; the style image (box-resized
    to the image resolution) is always used whole. None for an empty mask.
    """
    image = np.asarray(image, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != image.shape[:2]:
            raise ParameterError("mask does not match image")
        if not mask.any():
            return None
    style = box_resize(style_image, image.shape[1], image.shape[0])
    ga = gram_matrices(image, bank, mask)
    gb = gram_matrices(style, bank)
    return float(np.mean([np.linalg.norm(a - b) for a, b in zip(ga, gb)]))


def mask_iou(mask_a, mask_b):
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)
