"""Variance-preserving diffusion: noise schedule, generalized sampler step,
Tweedie's clean-image estimate, deterministic inversion, and the denoising
score matching loss.

The sampler update interpolates between deterministic DDIM (eta = 0) and the
stochastic variance-preserving SDE (eta at its upper bound): from state x at
time t_k,

    x_{t_{k-1}} = gamma_{t_{k-1}} * x0_hat(x)
                  - v_{t_k} * sqrt(v_{t_{k-1}}^2 - eta_k^2) * score(x, t_k)
                  + eta_k * z.

All functions accept either plain numpy arrays or autodiff tensors for the
score values, so the same code serves inference and adaptation training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule on continuous time t in (0, 1].

    gamma(t) = exp(-t^2 (beta_max - beta_min)/4 - t beta_min / 2) and
    v(t) = sqrt(1 - gamma(t)^2), so gamma^2 + v^2 = 1 identically.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3

    def __post_init__(self):
        if not 0 < self.t_min < 1:
            raise ValueError("t_min must lie in (0, 1)")
        if self.beta_max <= self.beta_min or self.beta_min <= 0:
            raise ValueError("need 0 < beta_min < beta_max")

    def gamma(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.exp(-0.25 * t * t * (self.beta_max - self.beta_min)
                      - 0.5 * t * self.beta_min)

    def v(self, t):
        g = self.gamma(t)
        return np.sqrt(np.maximum(1.0 - g * g, 0.0))


@dataclass
class SamplerConfig:
    """Reverse-time grid and per-step stochasticity.

    ``times[k]`` is t_k with k = 0..n_steps, ``times[0] = t_min`` and
    ``times[n_steps] = t_start``; the grid is uniform. ``eta`` is either a
    scalar applied at every step or one value per step index k = 1..n_steps.
    """

    n_steps: int = 2
    t_start: float = 1.0
    t_min: float = 1e-3
    eta: float | tuple = 0.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 < self.t_min < self.t_start <= 1.0:
            raise ValueError("need 0 < t_min < t_start <= 1")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_start, self.n_steps + 1)

    def eta_at(self, k: int) -> float:
        if np.isscalar(self.eta):
            return float(self.eta)
        return float(self.eta[k - 1])


def perturb(x0, t, z, schedule: NoiseSchedule):
    """Forward noising x_t = gamma_t x0 + v_t z."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in (0, 1]")
    g = schedule.gamma(t_arr)
    v = schedule.v(t_arr)
    if t_arr.ndim == 1:  # per-sample times for a batch (N, 1, H, W)
        g = g[:, None, None, None]
        v = v[:, None, None, None]
    return g * np.asarray(x0, dtype=np.float64) + v * np.asarray(z, dtype=np.float64)


def tweedie_estimate(x_t, t: float, score, schedule: NoiseSchedule):
    """Clean-image estimate (x_t + v_t^2 score) / gamma_t."""
    g = float(schedule.gamma(t))
    v = float(schedule.v(t))
    return (x_t + (v * v) * score) / g


def sampler_step(x_tk, k: int, score_fn, cfg: SamplerConfig,
                 schedule: NoiseSchedule, z=None):
    """One reverse step from times[k] to times[k-1]; k >= 1."""
    if k < 1 or k > cfg.n_steps:
        raise ValueError(f"step index {k} outside 1..{cfg.n_steps}")
    times = cfg.times
    t_k = float(times[k])
    t_prev = float(times[k - 1])
    eta = cfg.eta_at(k)
    v_prev = float(schedule.v(t_prev))
    if eta < 0 or eta > v_prev + 1e-12:
        raise ValueError("stochasticity exceeds target noise level")

    s = score_fn(x_tk, t_k)
    x0_hat = tweedie_estimate(x_tk, t_k, s, schedule)
    v_k = float(schedule.v(t_k))
    g_prev = float(schedule.gamma(t_prev))
    coeff = v_k * np.sqrt(max(v_prev * v_prev - eta * eta, 0.0))
    out = g_prev * x0_hat - coeff * s
    if eta > 0:
        if z is None:
            raise ValueError("eta > 0 requires a noise draw z")
        out = out + eta * np.asarray(z, dtype=np.float64)
    return out


def ddim_sample(x_start, score_fn, cfg: SamplerConfig,
                schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                return_state: bool = False):
    """Run the reverse recursion from t_start down to t_min.

    Returns the final Tweedie estimate of the clean image (and optionally
    the last diffusion state).
    """
    state = x_start
    for k in range(cfg.n_steps, 1, -1):
        z = None
        if cfg.eta_at(k) > 0:
            if rng is None:
                raise ValueError("stochastic sampling requires an rng")
            z = rng.standard_normal(np.shape(state))
        state = sampler_step(state, k, score_fn, cfg, schedule, z)
    # final step: keep the clean estimate before the schedule tail
    t_1 = float(cfg.times[1])
    s = score_fn(state, t_1)
    x0_hat = tweedie_estimate(state, t_1, s, schedule)
    if not return_state:
        return x0_hat
    z = None
    if cfg.eta_at(1) > 0:
        if rng is None:
            raise ValueError("stochastic sampling requires an rng")
        z = rng.standard_normal(np.shape(state))
    state = sampler_step(state, 1, score_fn, cfg, schedule, z)
    return x0_hat, state


def ddim_invert(x0, t_r: float, score_fn, n_steps: int,
                schedule: NoiseSchedule):
    """Deterministic inversion: the noise state at t_r whose forward DDIM
    trajectory returns (approximately) to x0.

    The clean image is first lifted to the t_min state using its own noise
    estimate, then the eta = 0 recursion runs with time increasing.
    """
    if not schedule.t_min <= t_r < 1.0:
        raise ValueError("t_r must lie in [t_min, 1)")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    grid = np.linspace(schedule.t_min, t_r, n_steps + 1)
    t0 = float(grid[0])
    s0 = score_fn(x0, t0)
    v0 = float(schedule.v(t0))
    state = float(schedule.gamma(t0)) * x0 - (v0 * v0) * s0
    for k in range(n_steps):
        t_lo, t_hi = float(grid[k]), float(grid[k + 1])
        s = score_fn(state, t_lo)
        x0_hat = tweedie_estimate(state, t_lo, s, schedule)
        eps_hat = -float(schedule.v(t_lo)) * s
        state = float(schedule.gamma(t_hi)) * x0_hat \
            + float(schedule.v(t_hi)) * eps_hat
    return state


def dsm_loss(score_fn, x0_batch: np.ndarray, t: np.ndarray, z: np.ndarray,
             schedule: NoiseSchedule):
    """Denoising score matching: mean_i v_i^2 || s(x_t_i, t_i) + z_i/v_i ||^2.

    The squared norm sums over pixels; the mean runs over the batch. Returns
    an autodiff tensor when the score function produces one, so the same
    expression drives training.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("t samples must lie in (0, 1]")
    x_t = perturb(x0_batch, t, z, schedule)
    v = schedule.v(t)[:, None, None, None]
    s = score_fn(x_t, t)
    resid = s + z / v
    weighted = (v * v) * resid * resid if isinstance(resid, ad.Tensor) \
        else (v * v) * resid ** 2
    n = x0_batch.shape[0]
    if isinstance(weighted, ad.Tensor):
        return ad.mul(ad.tsum(weighted), 1.0 / n)
    return float(weighted.sum() / n)
