"""Bias-corrected Adam over named numpy parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError
from .gaussians import GEOMETRY_GROUPS


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """Update ``params`` in place from ``grads``; ``lr`` is a float or a per-name dict.

    Returns ``(params, state)``. Non-finite gradients abort before any
    parameter is touched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ParameterError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ParameterError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient in group {name!r} at step {state.step + 1}", step=state.step + 1, group=name
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cloud_adam_step(cloud, grads, state, lrs, freeze_geometry=False):
    """Adam on every cloud group, then quaternion renormalization and color clamping."""
    g = grads.as_dict()
    if freeze_geometry:
        g = {k: (np.zeros_like(v) if k in GEOMETRY_GROUPS else v) for k, v in g.items()}
    adam_step(cloud.params(), g, state, lrs)
    cloud.normalize()
    return cloud, state
