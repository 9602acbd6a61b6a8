"""Linear-beta DDPM schedule, forward perturbation and timestep sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError


def weight_one_minus_alpha_bar(schedule, t):
    return 1.0 - schedule.alpha_bars[t]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    weight_fn: object = weight_one_minus_alpha_bar

    def check_t(self, t):
        if not 0 <= int(t) < self.T:
            raise ParameterError(f"timestep {t} outside [0, {self.T})")
        return int(t)

    def weight(self, t):
        """Guidance weight omega(t)."""
        return float(self.weight_fn(self, self.check_t(t)))

    def sqrt_alpha_bar(self, t):
        return math.sqrt(self.alpha_bars[self.check_t(t)])

    def sigma(self, t):
        return float(self.sigmas[self.check_t(t)])


def make_schedule(T=1000, beta_min=1e-4, beta_max=2e-2):
    if T < 2:
        raise ParameterError("T must be >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ParameterError("need 0 < beta_min < beta_max < 1")
    betas = np.linspace(beta_min, beta_max, T)
    alpha_bars = np.cumprod(1.0 - betas)
    return DiffusionSchedule(T=T, betas=betas, alpha_bars=alpha_bars, sigmas=np.sqrt(1.0 - alpha_bars))


def perturb(x0, t, eps, schedule):
    """z_t = sqrt(alpha_bar_t) x0 + sigma_t eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ParameterError(f"shape mismatch {x0.shape} vs {eps.shape}")
    return schedule.sqrt_alpha_bar(t) * x0 + schedule.sigma(t) * eps


def timestep_bounds(t_lo_frac, t_hi_frac, T):
    if not 0.0 <= t_lo_frac < t_hi_frac <= 1.0:
        raise ParameterError("timestep bounds must satisfy 0 <= lo < hi <= 1")
    lo = int(math.floor(t_lo_frac * T + 1e-9))
    hi = int(math.ceil(t_hi_frac * T - 1e-9))
    return lo, max(hi, lo + 1)


def sample_timestep(rng, t_lo_frac=0.0, t_hi_frac=1.0, schedule=None, T=None):
    """Uniform integer timestep in [lo*T, hi*T)."""
    T = schedule.T if schedule is not None else T
    lo, hi = timestep_bounds(t_lo_frac, t_hi_frac, T)
    return int(rng.integers(lo, hi))
