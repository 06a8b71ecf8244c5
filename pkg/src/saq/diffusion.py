"""VP noise schedule, toy Gaussian-mixture data and the exact noise predictor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

T_MIN = 1e-4
BISECT_MAX_ITER = 64
BISECT_TOL = 1e-13


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous VP schedule with linear beta(t).

    log alpha(t) = -(beta_max - beta_min) t^2 / 4 - beta_min t / 2 and
    sigma(t) = sqrt(1 - alpha(t)^2).
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_min: float = T_MIN

    def log_alpha(self, t):
        t = np.asarray(t, dtype=np.float64)
        return -0.25 * t**2 * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min

    def alpha(self, t):
        return np.exp(self.log_alpha(t))

    def sigma(self, t):
        return np.sqrt(-np.expm1(2.0 * self.log_alpha(t)))

    def log_sigma(self, t):
        return 0.5 * np.log(-np.expm1(2.0 * self.log_alpha(t)))

    def lam(self, t):
        return self.log_alpha(t) - self.log_sigma(t)

    @property
    def lambda_max(self) -> float:
        return float(self.lam(self.t_min))

    @property
    def lambda_min(self) -> float:
        return float(self.lam(self.T))


def lambda_of_t(schedule: NoiseSchedule, t: float) -> float:
    """Half log-SNR log(alpha_t / sigma_t); t must lie in (0, T]."""
    if not 0.0 < t <= schedule.T:
        raise ValueError(f"t={t} outside (0, {schedule.T}]")
    return float(schedule.lam(t))


def t_of_lambda(schedule: NoiseSchedule, lam: float, return_iterations: bool = False):
    """Invert lambda(t) on [t_min, T] by bisection."""
    lo_lam, hi_lam = schedule.lambda_min, schedule.lambda_max
    if not lo_lam - 1e-12 <= lam <= hi_lam + 1e-12:
        raise ValueError(f"lambda={lam} outside [{lo_lam}, {hi_lam}]")
    # lambda is decreasing in t: t_lo has the larger lambda
    t_lo, t_hi = schedule.t_min, schedule.T
    mid = 0.5 * (t_lo + t_hi)
    n = 0
    while n < BISECT_MAX_ITER:
        n += 1
        mid = 0.5 * (t_lo + t_hi)
        val = float(schedule.lam(mid))
        if abs(val - lam) <= BISECT_TOL or mid in (t_lo, t_hi):
            break
        if val > lam:
            t_lo = mid
        else:
            t_hi = mid
    if return_iterations:
        return mid, n
    return mid


def forward_sample(schedule: NoiseSchedule, x0, t, noise):
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return schedule.alpha(t) * x0 + schedule.sigma(t) * noise


@dataclass(frozen=True)
class ToyDistribution:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.stds, dtype=np.float64)
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if (c <= 0).any():
            raise ValueError("component standard deviations must be positive")
        if not (len(w) == len(mu) == len(c)):
            raise ValueError("weights, means and stds disagree on component count")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", c)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def gaussian(cls, mean, std: float = 1.0) -> "ToyDistribution":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(np.ones(1), mean[None, :], np.array([std]))

    @classmethod
    def ring(cls, n_modes: int = 8, radius: float = 4.0, std: float = 0.3) -> "ToyDistribution":
        ang = 2 * np.pi * np.arange(n_modes) / n_modes
        means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return cls(np.full(n_modes, 1.0 / n_modes), means, np.full(n_modes, std))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[k] + self.stds[k, None] * rng.standard_normal((n, self.dim))

def analytic_epsilon(dist: ToyDistribution, schedule: NoiseSchedule, x, t) -> np.ndarray:
    """Optimal noise prediction -sigma_t * grad log p_t(x) for the mixture.

    ``t`` is a scalar or one time per row of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > schedule.T):
        raise ValueError(f"t outside (0, {schedule.T}]")
    n = x.shape[0]
    a = np.broadcast_to(schedule.alpha(t), (n,))[:, None]
    s = np.broadcast_to(schedule.sigma(t), (n,))[:, None]
    var = a**2 * dist.stds[None, :] ** 2 + s**2                      # (n, K)
    diff = x[:, None, :] - a[:, :, None] * dist.means[None, :, :]    # (n, K, d)
    logp = (np.log(dist.weights)[None, :] - 0.5 * np.sum(diff**2, axis=-1) / var
            - 0.5 * dist.dim * np.log(2 * np.pi * var))
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    return s * np.einsum("nk,nkd->nd", resp / var, diff)


@dataclass
class AnalyticEvaluator:
    """Directional evaluator backed by the closed-form optimal predictor."""

    dist: ToyDistribution
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __call__(self, x, t):
        return analytic_epsilon(self.dist, self.schedule, x, t)


def gaussian_transport(dist: ToyDistribution, schedule: NoiseSchedule, x, t_from, t_to):
    """Exact probability-flow map between two times for a single Gaussian."""
    if len(dist.weights) != 1:
        raise ValueError("exact transport is only available for one component")
    mu, c = dist.means[0], float(dist.stds[0])
    a0, s0 = float(schedule.alpha(t_from)), float(schedule.sigma(t_from))
    a1, s1 = float(schedule.alpha(t_to)), float(schedule.sigma(t_to))
    ratio = math.sqrt((a1**2 * c**2 + s1**2) / (a0**2 * c**2 + s0**2))
    return a1 * mu + ratio * (np.asarray(x) - a0 * mu)
