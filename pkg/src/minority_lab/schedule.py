"""Discrete diffusion arithmetic on a 0..T grid.

``alpha_bar[0] == 1`` so the DDIM transition into t = 0 needs no special case.
Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

SCHEDULE_KINDS = ("cosine", "linear-beta")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1
    kind: str = "cosine"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not ab[-1] > 0:
            raise ValueError("alpha_bar[T] must be positive")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        # log-SNR on the grid; +inf at t = 0
        with np.errstate(divide="ignore"):
            lam = np.log(ab) - np.log1p(-ab)
        lam.setflags(write=False)
        object.__setattr__(self, "_log_snr", lam)
        object.__setattr__(self, "_ab_t", torch.tensor(ab, dtype=DTYPE))

    def ab(self, t: int) -> float:
        self.check_step(t, allow_zero=True)
        return float(self.alpha_bar[t])

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (lo <= t <= self.T):
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    @property
    def sigma_max(self) -> float:
        ab = self.alpha_bar[-1]
        return math.sqrt((1.0 - ab) / ab)

    # -- continuous-time extension (used by the PF-ODE) ---------------------
    #
    # For tau in [1, T] the log-SNR is interpolated linearly between grid
    # points; on [0, 1] the noise-to-signal ratio sigma = sqrt((1-ab)/ab)
    # is linear in tau so that sigma(0) = 0.

    def sigma_of_tau(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        lam = self._log_snr
        sigma1 = math.exp(-0.5 * lam[1])
        grid = np.arange(1, self.T + 1, dtype=np.float64)
        lam_interp = np.interp(np.clip(tau, 1.0, self.T), grid, lam[1:])
        return np.where(tau <= 1.0, tau * sigma1, np.exp(-0.5 * lam_interp))

    def tau_of_sigma(self, sigma):
        """Inverse of :meth:`sigma_of_tau`, clamped to [0, T]."""
        sigma = np.asarray(sigma, dtype=np.float64)
        lam = self._log_snr
        sigma1 = math.exp(-0.5 * lam[1])
        with np.errstate(divide="ignore"):
            target = -2.0 * np.log(np.maximum(sigma, 1e-300))
        grid = np.arange(1, self.T + 1, dtype=np.float64)
        # np.interp needs increasing x: log-SNR decreases in tau
        tau_hi = np.interp(target, lam[1:][::-1], grid[::-1])
        return np.where(sigma <= sigma1, sigma / sigma1, tau_hi)

    def alpha_bar_cont(self, t: torch.Tensor) -> torch.Tensor:
        """alpha_bar at (possibly fractional) step t; exact table value on integers."""
        t = torch.as_tensor(t, dtype=DTYPE)
        idx = torch.round(t)
        on_grid = (idx == t) & (idx >= 0) & (idx <= self.T)
        table = self._ab_t[idx.clamp(0, self.T).long()]
        sigma = torch.as_tensor(self.sigma_of_tau(t.detach().cpu().numpy()), dtype=DTYPE)
        interp = 1.0 / (1.0 + sigma**2)
        return torch.where(on_grid, table, interp)


def make_schedule(T: int = 50, kind: str = "cosine", offset: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if kind == "cosine":
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + offset) / (1 + offset) * math.pi / 2) ** 2
        raw = f / f[0]
        # clip per-step betas at 0.999 so alpha_bar[T] stays positive
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, 0.999)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "linear-beta":
        betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(T=T, alpha_bar=ab, kind=kind)


def _coef(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    ab = sched.alpha_bar[t]
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def add_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    sched.check_step(t, allow_zero=True)
    a, b = _coef(sched, t)
    return a * z0 + b * eps


def tweedie_denoise(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    sched.check_step(t)
    a, b = _coef(sched, t)
    return (z_t - b * eps_hat) / a


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    sched.check_step(t)
    z0 = tweedie_denoise(z_t, eps_hat, t, sched)
    a_prev, b_prev = _coef(sched, t - 1)
    return a_prev * z0 + b_prev * eps_hat


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if w == 1.0:
        return eps_cond
    return w * eps_cond + (1.0 - w) * eps_uncond
