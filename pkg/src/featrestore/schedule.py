"""Noise schedule and closed-form diffusion math.

Everything here is pure array arithmetic over precomputed schedule tables:
the forward marginal q(x_t | x_0), the clean-feature estimate from a noise
prediction, and the deterministic (eta = 0) DDIM reverse step.

Timesteps are 0-indexed: t in [0, T). The terminal reverse step uses the
convention alpha_bar[-1] := 1, so the last DDIM update returns the clean
estimate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class NoiseSchedule:
    """Per-step variance tables beta_t, alpha_t = 1 - beta_t, alpha_bar_t = prod(alpha)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self) -> None:
        if self.T < 1 or len(self.beta) != self.T:
            raise ValueError(f"schedule table length {len(self.beta)} != T={self.T}")
        if not (np.all(self.beta > 0.0) and np.all(self.beta < 1.0)):
            raise ValueError("beta values must lie strictly in (0, 1)")
        if not np.all(np.isfinite(self.alpha_bar)):
            raise ValueError("alpha_bar contains non-finite values")
        if self.T > 1 and not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (0.0 < self.alpha_bar[-1] and self.alpha_bar[0] < 1.0):
            raise ValueError("alpha_bar must stay inside (0, 1)")

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar lookup with the terminal convention alpha_bar[-1] := 1."""
        t = np.asarray(t)
        if np.any(t < -1) or np.any(t >= self.T):
            raise ValueError(f"timestep out of range [-1, {self.T}): {t}")
        return np.where(t < 0, 1.0, self.alpha_bar[np.maximum(t, 0)])


@dataclass
class DdimPlan:
    """Ascending subsequence of timesteps used by the deterministic sampler."""

    steps: np.ndarray
    count: int = field(default=0)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        if self.count == 0:
            self.count = len(self.steps)
        if len(self.steps) != self.count:
            raise ValueError("plan length does not match count")
        if self.count > 1 and not np.all(np.diff(self.steps) > 0):
            raise ValueError("plan steps must be strictly increasing")
        if self.steps[0] < 0:
            raise ValueError("plan steps must be non-negative")


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly interpolated beta table over T steps, with derived alpha tables."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
    sched.validate()
    return sched


def forward_diffuse(x0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Forward marginal: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` may be a scalar or a per-row array for batched ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = _abar_coeff(t, sched, x0.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def estimate_x0(x_t: np.ndarray, eps_hat: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Clean-feature estimate: (1/sqrt(abar_t)) * x_t - sqrt(1/abar_t - 1) * eps_hat."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} != eps_hat shape {eps_hat.shape}")
    abar = _abar_coeff(t, sched, x_t.ndim)
    if np.any(abar <= 0.0):
        raise ValueError("alpha_bar must be positive to invert the forward marginal")
    return (1.0 / np.sqrt(abar)) * x_t - np.sqrt(1.0 / abar - 1.0) * eps_hat


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic DDIM update from noise level t down to t_prev.

    ``t_prev = -1`` marks the terminal step (alpha_bar := 1), which returns
    the clean-feature estimate exactly.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    x0_hat = estimate_x0(x_t, eps_hat, t, sched)
    abar_prev = float(sched.alpha_bar_at(t_prev))
    return np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * np.asarray(eps_hat, dtype=np.float64)


def make_ddim_plan(sched: NoiseSchedule, count: int) -> DdimPlan:
    """Uniformly strided plan anchored at T-1.

    stride = floor((T-1)/(count-1)); steps[i] = T-1 - stride*(count-1-i).
    count = T gives the identity plan [0 .. T).
    """
    if count < 1 or count > sched.T:
        raise ValueError(f"need 1 <= count <= T={sched.T}, got {count}")
    if count == 1:
        steps = np.array([sched.T - 1], dtype=np.int64)
    else:
        stride = (sched.T - 1) // (count - 1)
        steps = sched.T - 1 - stride * np.arange(count - 1, -1, -1, dtype=np.int64)
    return DdimPlan(steps=steps, count=count)


def _abar_coeff(t, sched: NoiseSchedule, ndim: int) -> np.ndarray:
    """Schedule lookup shaped to broadcast against an (..., d) feature array."""
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}): {t}")
    abar = sched.alpha_bar[t]
    if abar.ndim > 0:
        abar = abar.reshape(abar.shape + (1,) * (ndim - abar.ndim))
    return abar
