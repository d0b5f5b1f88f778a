"""Continuous SDE noise schedules and their discretizations.

The primary schedule is the variance-exploding one: zero drift and a
geometric noise scale sigma(t) = sigma_min * (sigma_max / sigma_min)**t on
t in [0, 1].  A variance-preserving schedule (linear beta(t)) is kept as a
secondary, property-tested code path.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grid import Rng

SIGMA_MIN_DEFAULT = 0.01
SIGMA_MAX_DEFAULT = 378.0
N_DEFAULT = 2000
T_EPS_DEFAULT = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise schedule parameters plus the discretization step count N.

    VE uses (sigma_min, sigma_max); VP uses (beta_min, beta_max).  t_eps is
    the lower time cutoff that keeps training and perturbation away from the
    singular sigma -> sigma_min corner.
    """

    kind: str = "VE"
    sigma_min: float = SIGMA_MIN_DEFAULT
    sigma_max: float = SIGMA_MAX_DEFAULT
    beta_min: float = 0.1
    beta_max: float = 20.0
    N: int = N_DEFAULT
    t_eps: float = T_EPS_DEFAULT

    def __post_init__(self):
        if self.kind not in ("VE", "VP"):
            raise ParameterError(f"unknown schedule kind: {self.kind!r}")
        if self.kind == "VE" and not 0 < self.sigma_min < self.sigma_max:
            raise ParameterError("VE schedule needs 0 < sigma_min < sigma_max")
        if self.kind == "VP" and not 0 < self.beta_min < self.beta_max:
            raise ParameterError("VP schedule needs 0 < beta_min < beta_max")
        if self.N < 1:
            raise ParameterError("N must be >= 1")
        if self.t_eps <= 0:
            raise ParameterError("t_eps must be positive")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)


def sigma_of_t(sched: NoiseSchedule, t):
    """Geometric VE noise level sigma_min * (sigma_max/sigma_min)**t."""
    if sched.kind != "VE":
        raise ParameterError("sigma_of_t is defined for the VE schedule")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ParameterError("t must lie in [0, 1]")
    out = sched.sigma_min * (sched.sigma_max / sched.sigma_min) ** t
    return float(out) if out.ndim == 0 else out


def discretize(sched: NoiseSchedule):
    """N+1 noise levels sigma_i = sigma(i/N), i = 0..N, strictly increasing."""
    return sigma_of_t(sched, np.arange(sched.N + 1) / sched.N)


def _beta_of_t(sched: NoiseSchedule, t):
    return sched.beta_min + t * (sched.beta_max - sched.beta_min)


def _beta_integral(sched: NoiseSchedule, t):
    # integral of beta over [0, t] for the linear beta(t)
    return sched.beta_min * t + 0.5 * (sched.beta_max - sched.beta_min) * t**2


def perturb(sched: NoiseSchedule, x0, t: float, rng: Rng):
    """Diffuse x0 to time t; returns (x_t, z) with z the standard normal draw.

    VE: x_t = x0 + sigma(t) * z.
    VP: x_t = x0 * exp(-I/2) + sqrt(1 - exp(-I)) * z with I the beta integral.
    """
    if not sched.t_eps <= t <= 1:
        raise ParameterError(f"t={t} outside [t_eps, 1]")
    x0 = np.asarray(x0, dtype=float)
    z = rng.generator().standard_normal(x0.shape)
    if sched.kind == "VE":
        return x0 + sigma_of_t(sched, t) * z, z
    integral = _beta_integral(sched, t)
    mean_scale = math.exp(-0.5 * integral)
    std = math.sqrt(1.0 - math.exp(-integral))
    return x0 * mean_scale + std * z, z


def kernel_score(x_t, x0, sigma: float):
    """Gradient of log N(x_t; x0, sigma^2 I) with respect to x_t.

    This is -(x_t - x0) / sigma^2; the leading minus sign is the gradient of
    the Gaussian log-density.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    return -(np.asarray(x_t) - np.asarray(x0)) / sigma**2


def drift_diffusion(sched: NoiseSchedule, x, t: float):
    """Drift f(x, t) and diffusion g(t) of the forward SDE.

    VE: f = 0 and g(t)^2 = d[sigma^2]/dt, evaluated analytically for the
    geometric schedule (g = sigma(t) * sqrt(2 ln(sigma_max/sigma_min))).
    VP: f = -beta(t) x / 2, g = sqrt(beta(t)).
    """
    if not sched.t_eps <= t <= 1:
        raise ParameterError(f"t={t} outside [t_eps, 1]")
    x = np.asarray(x)
    if sched.kind == "VE":
        g = sigma_of_t(sched, t) * math.sqrt(2.0 * sched.log_ratio)
        return np.zeros_like(x), g
    beta = _beta_of_t(sched, t)
    return -0.5 * beta * x, math.sqrt(beta)
