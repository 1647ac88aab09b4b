"""Interpolant schedules, base distributions and target velocities.

The refiner's base distribution keeps the data signal, ``x0 = x1 + sigma*eps``,
and travels along ``x_t = alpha(t) x0 + beta(t) x1 + s(t) z`` with the linear
pair ``alpha = 1 - t``, ``beta = t``. The optional stochastic term uses
``s(t) = sqrt(t (1 - t))``.

Also hosts the chi-square model of aligned RMSD under isotropic noise and its
Wilson-Hilferty quantile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .geom3d import as_points


class ScheduleKind(str, Enum):
    GENERATOR_GAUSSIAN = "generator_gaussian"
    REFINER_LINEAR = "refiner_linear"


@dataclass(frozen=True)
class Schedule:
    """Linear interpolant coefficients, optionally with the ``sqrt(t(1-t))`` term.

    Both kinds share ``alpha = 1 - t`` and ``beta = t``; ``kind`` only selects
    the base distribution (pure Gaussian noise vs data plus noise).
    """

    kind: ScheduleKind = ScheduleKind.REFINER_LINEAR
    stochastic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def beta(self, t: float) -> float:
        return t

    def s(self, t: float) -> float:
        if not self.stochastic:
            return 0.0
        return math.sqrt(max(t * (1.0 - t), 0.0))

    def d_alpha(self, t: float) -> float:
        return -1.0

    def d_beta(self, t: float) -> float:
        return 1.0

    def d_s(self, t: float) -> float:
        if not self.stochastic:
            return 0.0
        if t <= 0.0 or t >= 1.0:
            raise ValueError("velocity undefined at endpoint for the stochastic schedule")
        return (1.0 - 2.0 * t) / (2.0 * math.sqrt(t * (1.0 - t)))

    def sample_time(self, rng: np.random.Generator, size=None, margin: float = 1e-3):
        """Training times: uniform on [0, 1], or on [margin, 1 - margin] if stochastic."""
        if self.stochastic:
            return rng.uniform(margin, 1.0 - margin, size=size)
        return rng.uniform(0.0, 1.0, size=size)


@dataclass(frozen=True)
class RefinerBaseConfig:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


class NoiseDraw(NamedTuple):
    epsilon: np.ndarray
    z: np.ndarray


def draw_noise(n_atoms: int, rng: np.random.Generator) -> NoiseDraw:
    """Independent standard-normal ``epsilon`` and ``z`` of shape (N, 3)."""
    return NoiseDraw(rng.standard_normal((n_atoms, 3)), rng.standard_normal((n_atoms, 3)))


def sample_refiner_base(x1, cfg: RefinerBaseConfig, rng: np.random.Generator):
    """Draw ``x0 = x1 + sigma * eps``; returns ``(x0, noise)``."""
    x1 = as_points(x1, "x1")
    noise = draw_noise(x1.shape[0], rng)
    return x1 + cfg.sigma * noise.epsilon, noise


def interpolate(x0, x1, t: float, sched: Schedule, z=None) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out = sched.alpha(t) * x0 + sched.beta(t) * x1
    s = sched.s(t)
    if s != 0.0:
        if z is None:
            raise ValueError("stochastic schedule needs a z draw")
        z = np.asarray(z, dtype=np.float64)
        if z.shape != x0.shape:
            raise ValueError(f"shape mismatch: z {z.shape} vs {x0.shape}")
        out = out + s * z
    return out


def target_velocity(x0, x1, t: float, sched: Schedule, z=None) -> np.ndarray:
    """Time derivative of :func:`interpolate` at fixed ``x0, x1, z``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out = sched.d_alpha(t) * x0 + sched.d_beta(t) * x1
    if sched.stochastic:
        ds = sched.d_s(t)
        if z is None:
            raise ValueError("stochastic schedule needs a z draw")
        out = out + ds * np.asarray(z, dtype=np.float64)
    return out


def self_calibration_time(sigma_star: float, sigma: float) -> float:
    """Flow time at which the scheduled noise ``(1 - t) sigma`` equals ``sigma_star``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if sigma_star < 0:
        raise ValueError("sigma_star must be non-negative")
    if sigma_star > sigma:
        raise ValueError("upstream noise exceeds refiner coverage")
    return 1.0 - sigma_star / sigma


def _internal_dof(n_atoms: int) -> int:
    if n_atoms < 3:
        raise ValueError("need at least 3 atoms (3N - 6 >= 3)")
    return 3 * n_atoms - 6


def wh_rmsd_quantile(n_atoms: int, sigma_star: float, q_k: float) -> float:
    """Wilson-Hilferty approximation of the RMSD quantile under isotropic noise.

    ``RMSD = sigma_star * sqrt(chi2_d / N)`` with ``d = 3N - 6``; the cube
    root of ``chi2_d / d`` is treated as normal with mean ``1 - 2/(9d)`` and
    variance ``2/(9d)``, evaluated at the standard-normal quantile ``q_k``.

    >>> round(wh_rmsd_quantile(10, 1.0, 1.96), 2)
    1.98
    """
    d = _internal_dof(n_atoms)
    if sigma_star < 0:
        raise ValueError("sigma_star must be non-negative")
    c = 2.0 / (9.0 * d)
    base = 1.0 - c + q_k * math.sqrt(c)
    if base <= 0:
        return 0.0
    return sigma_star * math.sqrt(d / n_atoms * base**3)


def sample_rmsd_chi(n_atoms: int, sigma_star: float, rng: np.random.Generator, size=None):
    """Draw ``sigma_star * sqrt(chi2_d / N)`` with ``d = 3N - 6``."""
    d = _internal_dof(n_atoms)
    return sigma_star * np.sqrt(rng.chisquare(d, size=size) / n_atoms)


def chi_mean(d: int) -> float:
    """Mean of the chi distribution with ``d`` degrees of freedom."""
    return math.sqrt(2.0) * math.exp(math.lgamma((d + 1) / 2.0) - math.lgamma(d / 2.0))
