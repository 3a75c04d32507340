"""Linear-beta noise schedule and closed-form forward noising.

Timesteps are 1..T at every interface. Index 0 is the clean endpoint
(alpha_bar = 1, sigma = 0, lambda = +inf), used only as the final solver
target. Fractional timesteps interpolate log(alpha_bar) linearly between
integer steps; this is what the samplers use to reach arbitrary log-SNR
values.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .numerics import Rng


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class MapNoiseSpec:
    std: float = 2.0

    def __post_init__(self):
        if self.std <= 0:
            raise ScheduleError(f"map noise std must be positive, got {self.std}")
        if self.std < 1:
            warnings.warn(
                f"map noise std {self.std} < 1 cannot reliably flip +/-1 bits", stacklevel=2
            )


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    # 0-based storage: entry [t] is timestep t, entry [0] the clean endpoint
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)
    sigma: np.ndarray = field(repr=False, compare=False)
    lam: np.ndarray = field(repr=False, compare=False)

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    # continuous-time views ----------------------------------------------------
    def log_alpha_bar(self, t: float) -> float:
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        return float(np.interp(t, np.arange(self.T + 1), self._log_ab))

    def coeffs(self, t: float) -> tuple[float, float, float]:
        """(sqrt(alpha_bar), sigma, lambda) at a possibly fractional timestep."""
        if float(t) == int(t):
            i = int(t)
            if not 0 <= i <= self.T:
                raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
            return math.sqrt(self.alpha_bar[i]), float(self.sigma[i]), float(self.lam[i])
        la = self.log_alpha_bar(t)
        ab = math.exp(la)
        s = math.sqrt(-math.expm1(la))
        return math.sqrt(ab), s, 0.5 * la - math.log(s)

    def lambda_at(self, t: float) -> float:
        return self.coeffs(t)[2]

    def timestep_for_lambda(self, lam: float) -> float:
        """Inverse of lambda_at over [1, T] (exact for the interpolated schedule)."""
        if math.isinf(lam) and lam > 0:
            return 0.0
        # alpha_bar = sigmoid(2 lambda)
        la = -math.log1p(math.exp(-2.0 * lam)) if lam > -350 else 2.0 * lam
        # _log_ab is strictly decreasing; np.interp needs increasing xp
        t = float(np.interp(-la, -self._log_ab, np.arange(self.T + 1)))
        return t

    @property
    def _log_ab(self) -> np.ndarray:
        return np.log(self.alpha_bar)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    with np.errstate(divide="ignore"):
        lam = 0.5 * np.log(alpha_bar) - np.log(sigma)
    return NoiseSchedule(T, beta_start, beta_end, beta, alpha, alpha_bar, sigma, lam)


def _noise(schedule: NoiseSchedule, clean: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
    if clean.shape != noise.shape:
        raise ScheduleError(f"clean {tuple(clean.shape)} and noise {tuple(noise.shape)} differ in shape")
    ts = np.atleast_1d(np.asarray(t))
    for s in ts:
        schedule._check(int(s))
    a = torch.as_tensor(np.sqrt(schedule.alpha_bar[ts]), dtype=clean.dtype)
    s = torch.as_tensor(schedule.sigma[ts], dtype=clean.dtype)
    if np.ndim(t) == 0:
        return a[0] * clean + s[0] * noise
    # per-sample timesteps along the batch axis
    shape = (-1,) + (1,) * (clean.dim() - 1)
    return a.view(shape) * clean + s.view(shape) * noise


def add_noise_image(schedule: NoiseSchedule, x0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """sqrt(alpha_bar_t) * x0 + sigma_t * eps; ``t`` is an int or one int per batch row."""
    return _noise(schedule, x0, eps, t)


def add_noise_map(schedule: NoiseSchedule, m0: torch.Tensor, eps_m: torch.Tensor, t) -> torch.Tensor:
    """Same closed form as images; ``eps_m`` already carries the map noise std."""
    return _noise(schedule, m0, eps_m, t)


def sample_timesteps(rng: Rng, T: int, batch: int) -> np.ndarray:
    if batch < 1:
        raise ScheduleError(f"batch must be >= 1, got {batch}")
    return rng.integers(1, T, size=batch)
